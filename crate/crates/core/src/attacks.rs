//! Adversary injection: label-poisoning clients and score-inverting
//! committee voters, applied uniformly across every topology.
//!
//! Malicious identity is static per run and derived from the master seed;
//! honest nodes' data and state are untouched by construction.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{poison_labels, Dataset};
use crate::rng;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("malicious fraction {0} must lie in [0, 0.51)")]
    FractionOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Malicious nodes train (and evaluate) on label-shifted data.
    PoisonData,
    /// Malicious committee members report order-inverted scores.
    MaliciousVote,
}

/// Which nodes misbehave and how.
#[derive(Debug, Clone)]
pub struct AttackPlan {
    pub malicious_fraction: f64,
    pub malicious_ids: Vec<u64>,
    pub modes: Vec<AttackMode>,
}

impl AttackPlan {
    /// No adversary.
    pub fn none() -> Self {
        Self { malicious_fraction: 0.0, malicious_ids: Vec::new(), modes: Vec::new() }
    }

    /// Seed-derived static adversary set:
    /// `floor(fraction * node_count)` distinct node ids. The floor is
    /// taken with a small epsilon so fractions like 1/3 stored in binary
    /// still select the intended count.
    pub fn derive(
        fraction: f64,
        node_count: usize,
        modes: Vec<AttackMode>,
        master_seed: u64,
    ) -> Result<Self, AttackError> {
        if !(0.0..0.51).contains(&fraction) {
            return Err(AttackError::FractionOutOfRange(fraction));
        }
        let count = (fraction * node_count as f64 + 1e-9).floor() as usize;
        let mut ids: Vec<u64> = (0..node_count as u64).collect();
        ids.shuffle(&mut rng::stream(master_seed, "attackers", &[]));
        let mut malicious_ids: Vec<u64> = ids.into_iter().take(count).collect();
        malicious_ids.sort_unstable();
        Ok(Self { malicious_fraction: fraction, malicious_ids, modes })
    }

    pub fn is_malicious(&self, node: u64) -> bool {
        self.malicious_ids.binary_search(&node).is_ok()
    }

    pub fn poisons_data(&self) -> bool {
        self.modes.contains(&AttackMode::PoisonData)
    }

    pub fn votes_maliciously(&self) -> bool {
        self.modes.contains(&AttackMode::MaliciousVote)
    }
}

/// Label-shifts every malicious node's whole slice; honest slices are
/// returned untouched (same allocation, bit-identical).
pub fn apply_poisoning(partitions: &[Dataset], plan: &AttackPlan) -> Vec<Dataset> {
    partitions
        .iter()
        .enumerate()
        .map(|(node, slice)| {
            if plan.poisons_data() && plan.is_malicious(node as u64) {
                poison_labels(slice, 1.0)
            } else {
                slice.clone()
            }
        })
        .collect()
}

/// Order-reversing score flip: each reported score is
/// `(max + min) - true_score`, so the adversary's ranking is exactly
/// inverted while the value range is preserved.
pub fn malicious_vote(true_scores: &[f32]) -> Vec<f32> {
    let min = true_scores.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = true_scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    true_scores.iter().map(|&s| (max + min) - s).collect()
}
