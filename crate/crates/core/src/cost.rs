//! Simulated-time model.
//!
//! Time is a critical path over three coefficient classes: `flop_s` per
//! multiply-accumulate, `byte_s` per wire byte, `msg_s` per message.
//! A shard's training work (client and server segments) is serialized
//! within the shard; shards run in parallel, so parallel topologies take
//! the max over shards while the sequential baseline sums everything.
//! Batch messages carry the byte and message coefficients; model
//! collection at aggregation points is costed as parameter operations, and
//! the ledger commit is the only place model payload bytes hit the wire
//! coefficient.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::RoundStats;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("cost coefficients must be non-negative and finite (got {0})")]
    NegativeCoefficient(f64),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds per multiply-accumulate.
    pub flop_s: f64,
    /// Seconds per transferred byte.
    pub byte_s: f64,
    /// Fixed latency per message.
    pub msg_s: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        // roughly: 1 GMAC/s of compute, ~80 MB/s of transfer, 0.5 ms latency
        Self { flop_s: 1e-9, byte_s: 1.25e-8, msg_s: 5e-4 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), CostError> {
        for &c in [self.flop_s, self.byte_s, self.msg_s].iter() {
            if c < 0.0 || !c.is_finite() {
                return Err(CostError::NegativeCoefficient(c));
            }
        }
        Ok(())
    }
}

/// Additive breakdown of one simulated round or cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RoundTime {
    pub compute_s: f64,
    pub comm_s: f64,
    pub agg_s: f64,
    pub eval_s: f64,
    pub ledger_s: f64,
}

impl RoundTime {
    pub fn total_s(&self) -> f64 {
        self.compute_s + self.comm_s + self.agg_s + self.eval_s + self.ledger_s
    }
}

fn stream_comm_s(msgs: u64, bytes: u64, cm: &CostModel) -> f64 {
    msgs as f64 * cm.msg_s + bytes as f64 * cm.byte_s
}

fn shard_compute_macs(stats: &RoundStats) -> u64 {
    stats.streams.iter().map(|s| s.client_macs + s.server_macs).sum()
}

/// Sequential round: every client stream runs back to back, compute and
/// communication both summed.
pub fn serial_round_time(stats: &RoundStats, relay_params: u64, cm: &CostModel) -> RoundTime {
    let compute: u64 = shard_compute_macs(stats);
    let comm: f64 = stats.streams.iter().map(|s| stream_comm_s(s.messages, s.bytes, cm)).sum();
    RoundTime {
        compute_s: compute as f64 * cm.flop_s,
        comm_s: comm,
        agg_s: relay_params as f64 * cm.flop_s,
        ..Default::default()
    }
}

/// Parallel round over one or more shards: compute is the largest shard's
/// serialized work, communication the slowest single stream.
pub fn parallel_round_time(per_shard: &[&RoundStats], collected_params: u64, cm: &CostModel) -> RoundTime {
    let compute = per_shard.iter().map(|s| shard_compute_macs(s)).max().unwrap_or(0);
    let comm = per_shard
        .iter()
        .flat_map(|s| s.streams.iter())
        .map(|s| stream_comm_s(s.messages, s.bytes, cm))
        .fold(0.0f64, f64::max);
    RoundTime {
        compute_s: compute as f64 * cm.flop_s,
        comm_s: comm,
        agg_s: collected_params as f64 * cm.flop_s,
        ..Default::default()
    }
}

/// Model-collection term for a global aggregation step.
pub fn aggregation_time(params: u64, cm: &CostModel) -> f64 {
    params as f64 * cm.flop_s
}

/// Cross-evaluation term: committee members evaluate in parallel, so the
/// slowest member's forward work bounds the cycle.
pub fn evaluation_time(max_member_macs: u64, cm: &CostModel) -> f64 {
    max_member_macs as f64 * cm.flop_s
}

/// Ledger-commit term: committed payload bytes plus one message per event.
pub fn ledger_time(payload_bytes: u64, events: u64, cm: &CostModel) -> f64 {
    payload_bytes as f64 * cm.byte_s + events as f64 * cm.msg_s
}
