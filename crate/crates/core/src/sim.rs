//! Experiment runner: config parsing and validation, the dataset/attack
//! pipeline, metrics and summary emission, chain export, and run
//! comparison.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacks::{apply_poisoning, AttackMode, AttackPlan};
use crate::cost::CostModel;
use crate::data::{gen_blobs, load_idx, partition, Dataset, PartitionPlan, PartitionScheme};
use crate::ledger::{run_bsfl, BsflRun, EvalMetric};
use crate::nn::ModelSpec;
use crate::rng;
use crate::topology::{run_sfl, run_sl, run_ssfl, TopologyConfig, TrainHistory};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("runtime invariant violated: {0}")]
    Runtime(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn config_err(e: impl std::fmt::Display) -> SimError {
    SimError::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> SimError {
    SimError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Sl,
    Sfl,
    Ssfl,
    Bsfl,
}

impl Topology {
    pub fn name(&self) -> &'static str {
        match self {
            Topology::Sl => "sl",
            Topology::Sfl => "sfl",
            Topology::Ssfl => "ssfl",
            Topology::Bsfl => "bsfl",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    LabelShards,
    Dirichlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Loss,
    Accuracy,
}

fn default_rounds() -> usize {
    1
}
fn default_cycles() -> usize {
    40
}
fn default_epochs() -> usize {
    1
}
fn default_lr() -> f32 {
    0.05
}
fn default_batch() -> usize {
    16
}
fn default_patience() -> Option<usize> {
    Some(3)
}
fn default_top_k() -> usize {
    2
}
fn default_metric() -> MetricName {
    MetricName::Loss
}
fn default_fraction() -> f64 {
    0.0
}
fn default_modes() -> Vec<AttackMode> {
    vec![AttackMode::PoisonData, AttackMode::MaliciousVote]
}
fn default_source() -> DatasetSource {
    DatasetSource::Blobs
}
fn default_per_class() -> usize {
    200
}
fn default_side() -> usize {
    14
}
fn default_noise() -> f32 {
    0.8
}
fn default_scheme() -> SchemeName {
    SchemeName::LabelShards
}
fn default_alpha() -> f64 {
    0.5
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_test_fraction() -> f64 {
    0.1
}
fn default_cost_flop() -> f64 {
    CostModel::default().flop_s
}
fn default_cost_byte() -> f64 {
    CostModel::default().byte_s
}
fn default_cost_msg() -> f64 {
    CostModel::default().msg_s
}

/// Flat run configuration; unknown keys are a hard error so sweep-script
/// typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub topology: Topology,
    pub node_count: usize,
    #[serde(default = "default_rounds")]
    pub shard_count: usize,
    #[serde(default = "default_rounds")]
    pub clients_per_shard: usize,
    #[serde(default = "default_rounds")]
    pub rounds_per_cycle: usize,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_metric")]
    pub eval_metric: MetricName,
    #[serde(default = "default_fraction")]
    pub malicious_fraction: f64,
    #[serde(default = "default_modes")]
    pub attack_modes: Vec<AttackMode>,
    #[serde(default = "default_source")]
    pub dataset: DatasetSource,
    #[serde(default = "default_per_class")]
    pub blobs_per_class: usize,
    #[serde(default = "default_side")]
    pub blobs_side: usize,
    #[serde(default = "default_noise")]
    pub blobs_noise: f32,
    #[serde(default)]
    pub idx_images: Option<String>,
    #[serde(default)]
    pub idx_labels: Option<String>,
    #[serde(default = "default_scheme")]
    pub partition_scheme: SchemeName,
    #[serde(default = "default_alpha")]
    pub dirichlet_alpha: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_cost_flop")]
    pub cost_flop_s: f64,
    #[serde(default = "default_cost_byte")]
    pub cost_byte_s: f64,
    #[serde(default = "default_cost_msg")]
    pub cost_msg_s: f64,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, SimError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Structural validation plus advisory warnings (returned, not
    /// printed, so callers decide where they go).
    pub fn validate(&self) -> Result<Vec<String>, SimError> {
        let mut warnings = Vec::new();
        self.cost_model().validate().map_err(config_err)?;
        if !(0.0..0.51).contains(&self.malicious_fraction) {
            return Err(SimError::Config(format!(
                "malicious_fraction {} outside [0, 0.51)",
                self.malicious_fraction
            )));
        }
        if self.val_fraction < 0.0 || self.test_fraction < 0.0
            || self.val_fraction + self.test_fraction >= 0.9
        {
            return Err(SimError::Config("validation/test fractions leave no training data".into()));
        }
        match self.topology {
            Topology::Sl | Topology::Sfl => {
                if self.node_count < 2 {
                    return Err(SimError::Config("need one server and at least one client".into()));
                }
            }
            Topology::Ssfl | Topology::Bsfl => {
                let expect = self.shard_count * (self.clients_per_shard + 1);
                if self.node_count != expect {
                    return Err(SimError::Config(format!(
                        "node_count {} must equal shard_count x (clients_per_shard + 1) = {}",
                        self.node_count, expect
                    )));
                }
            }
        }
        if self.topology == Topology::Bsfl {
            if self.top_k == 0 || self.top_k > self.shard_count {
                return Err(SimError::Config(format!(
                    "top_k {} must lie in 1..={}",
                    self.top_k, self.shard_count
                )));
            }
            // advisory bound, violated by the small reference layout itself
            let n = self.shard_count;
            if !(self.top_k > 2 && self.top_k * 2 < n) {
                warnings.push(format!(
                    "top_k {} is outside the recommended 2 < K < N/2 band for a committee of {}",
                    self.top_k, n
                ));
            }
        }
        if self.dataset == DatasetSource::Idx && (self.idx_images.is_none() || self.idx_labels.is_none())
        {
            return Err(SimError::Config("idx dataset needs idx_images and idx_labels paths".into()));
        }
        if self.dataset == DatasetSource::Blobs && self.blobs_side < 8 {
            return Err(SimError::Config("blobs_side must be at least 8".into()));
        }
        Ok(warnings)
    }

    pub fn cost_model(&self) -> CostModel {
        CostModel { flop_s: self.cost_flop_s, byte_s: self.cost_byte_s, msg_s: self.cost_msg_s }
    }

    pub fn topology_config(&self) -> TopologyConfig {
        TopologyConfig {
            node_count: self.node_count,
            shard_count: self.shard_count,
            clients_per_shard: self.clients_per_shard,
            rounds_per_cycle: self.rounds_per_cycle,
            cycles: self.cycles,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.seed,
            patience: self.patience,
        }
    }

    pub fn attacked(&self) -> bool {
        self.malicious_fraction > 0.0 && !self.attack_modes.is_empty()
    }
}

/// Machine-readable run result, written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub topology: String,
    pub seed: u64,
    pub attacked: bool,
    pub malicious_nodes: Vec<u64>,
    pub final_test_loss: f32,
    pub final_test_acc: f32,
    pub avg_round_time_s: f64,
    pub total_sim_time_s: f64,
    pub cycles_run: usize,
    pub rounds_total: usize,
    pub early_stopped: bool,
    pub final_val_loss: f32,
}

/// The train/validation/test cut and the per-node slices for a config.
pub struct DataBundle {
    pub spec: ModelSpec,
    pub partitions: Vec<Dataset>,
    pub validation: Dataset,
    pub test: Dataset,
    pub plan: AttackPlan,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<DataBundle, SimError> {
    let base = match cfg.dataset {
        DatasetSource::Blobs => gen_blobs(
            cfg.blobs_per_class,
            cfg.blobs_side,
            cfg.blobs_noise,
            rng::mix(cfg.seed, "dataset", &[]),
        ),
        DatasetSource::Idx => load_idx(
            Path::new(cfg.idx_images.as_ref().unwrap()),
            Path::new(cfg.idx_labels.as_ref().unwrap()),
        )
        .map_err(config_err)?,
    };
    let dims = &base.shape.dims;
    let spec = ModelSpec::two_conv_classifier(dims[0], dims[1], dims[2]);

    // held-out validation and test cuts, then per-node slices
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "holdout-split", &[]));
    let val_n = (base.len() as f64 * cfg.val_fraction) as usize;
    let test_n = (base.len() as f64 * cfg.test_fraction) as usize;
    let take = |idx: &[usize]| Dataset {
        images: idx.iter().map(|&i| base.images[i].clone()).collect(),
        labels: idx.iter().map(|&i| base.labels[i]).collect(),
        shape: base.shape.clone(),
    };
    let validation = take(&order[..val_n]);
    let test = take(&order[val_n..val_n + test_n]);
    let train = take(&order[val_n + test_n..]);

    let scheme = match cfg.partition_scheme {
        SchemeName::LabelShards => PartitionScheme::LabelShards,
        SchemeName::Dirichlet => PartitionScheme::Dirichlet { alpha: cfg.dirichlet_alpha },
    };
    let plan = PartitionPlan {
        scheme,
        node_count: cfg.node_count,
        seed: rng::mix(cfg.seed, "partition", &[]),
    };
    let partitions = partition(&train, &plan).map_err(config_err)?;

    let attack = AttackPlan::derive(
        cfg.malicious_fraction,
        cfg.node_count,
        cfg.attack_modes.clone(),
        cfg.seed,
    )
    .map_err(config_err)?;
    let partitions = apply_poisoning(&partitions, &attack);
    Ok(DataBundle { spec, partitions, validation, test, plan: attack })
}

/// Runs the configured topology end to end and writes `metrics.csv`,
/// `summary.json` and (ledger runs) the chain export under `out`.
pub fn execute_run(cfg: &RunConfig, out: &Path) -> Result<RunSummary, SimError> {
    cfg.validate()?;
    let bundle = prepare_data(cfg)?;
    let tc = cfg.topology_config();
    let cost = cfg.cost_model();
    let metric = match cfg.eval_metric {
        MetricName::Loss => EvalMetric::Loss,
        MetricName::Accuracy => EvalMetric::Accuracy,
    };

    let (history, bsfl): (TrainHistory, Option<BsflRun>) = match cfg.topology {
        Topology::Sl => (
            run_sl(&tc, &bundle.spec, &bundle.partitions, &bundle.validation, &cost)
                .map_err(runtime_err)?,
            None,
        ),
        Topology::Sfl => (
            run_sfl(&tc, &bundle.spec, &bundle.partitions, &bundle.validation, &cost)
                .map_err(runtime_err)?,
            None,
        ),
        Topology::Ssfl => (
            run_ssfl(&tc, &bundle.spec, &bundle.partitions, &bundle.validation, &cost)
                .map_err(runtime_err)?,
            None,
        ),
        Topology::Bsfl => {
            let run = run_bsfl(
                &tc,
                &bundle.spec,
                &bundle.partitions,
                &bundle.validation,
                &cost,
                &bundle.plan,
                metric,
                cfg.top_k,
            )
            .map_err(runtime_err)?;
            (run.history.clone(), Some(run))
        }
    };

    let (final_test_loss, final_test_acc) =
        history.test_metrics(&bundle.spec, &bundle.test).map_err(runtime_err)?;
    let rounds_total = match cfg.topology {
        Topology::Sl | Topology::Sfl => history.rows.len(),
        Topology::Ssfl | Topology::Bsfl => history.rows.len() * cfg.rounds_per_cycle,
    };
    let total_sim_time_s = history.total_sim_time_s();
    let summary = RunSummary {
        topology: cfg.topology.name().to_string(),
        seed: cfg.seed,
        attacked: cfg.attacked(),
        malicious_nodes: bundle.plan.malicious_ids.clone(),
        final_test_loss,
        final_test_acc,
        avg_round_time_s: total_sim_time_s / rounds_total.max(1) as f64,
        total_sim_time_s,
        cycles_run: history.rows.len(),
        rounds_total,
        early_stopped: history.early_stopped,
        final_val_loss: history.rows.last().map(|r| r.val_loss).unwrap_or(f32::NAN),
    };

    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(cfg, &history))?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    if let Some(run) = &bsfl {
        export_chain(run, &out.join("chain"))?;
    }
    Ok(summary)
}

/// Fixed column set, rows strictly ordered by (cycle, round).
pub fn metrics_csv(cfg: &RunConfig, history: &TrainHistory) -> String {
    let mut out = String::from(
        "topology,seed,cycle,round,val_loss,val_acc,sim_time_s,messages,bytes,attacked,winners\n",
    );
    for row in &history.rows {
        let winners = row
            .winners
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            cfg.topology.name(),
            cfg.seed,
            row.cycle,
            row.round,
            row.val_loss,
            row.val_acc,
            row.time.total_s(),
            row.messages,
            row.bytes,
            cfg.attacked(),
            winners
        );
    }
    out
}

#[derive(Serialize)]
struct BlockFile<'a> {
    height: u64,
    previous_hash: String,
    state_hash: String,
    block_hash: String,
    events: Vec<EventFile<'a>>,
}

#[derive(Serialize)]
struct EventFile<'a> {
    kind: &'static str,
    cycle: u64,
    digest: String,
    payload_ref: &'a str,
}

/// One file per block plus content-addressed payload files; weight
/// payloads keep the binary container format and a `.sfw` suffix.
pub fn export_chain(run: &BsflRun, dir: &Path) -> Result<(), SimError> {
    let blocks_dir = dir.join("blocks");
    let payloads_dir = dir.join("payloads");
    std::fs::create_dir_all(&blocks_dir)?;
    std::fs::create_dir_all(&payloads_dir)?;
    for block in &run.chain.blocks {
        let file = BlockFile {
            height: block.height,
            previous_hash: hex::encode(block.previous_hash),
            state_hash: hex::encode(block.state_hash),
            block_hash: hex::encode(block.block_hash()),
            events: block
                .events
                .iter()
                .map(|e| EventFile {
                    kind: e.kind.name(),
                    cycle: e.cycle,
                    digest: hex::encode(e.digest),
                    payload_ref: &e.payload_ref,
                })
                .collect(),
        };
        std::fs::write(
            blocks_dir.join(format!("block_{:05}.json", block.height)),
            serde_json::to_string_pretty(&file).expect("block serializes") + "\n",
        )?;
    }
    for (digest, bytes) in &run.chain.payloads {
        let is_weights = bytes.starts_with(crate::nn::serial::MAGIC);
        let ext = if is_weights { "sfw" } else { "bin" };
        std::fs::write(payloads_dir.join(format!("{}.{}", hex::encode(digest), ext)), bytes)?;
    }
    Ok(())
}

/// Table III-shaped comparison of completed runs: one row per run
/// directory with approach, scenario, final test loss and average
/// simulated round time.
pub fn compare(run_dirs: &[PathBuf]) -> Result<String, SimError> {
    if run_dirs.len() < 2 {
        return Err(SimError::Config("compare needs at least two run directories".into()));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join("summary.json");
        let text = std::fs::read_to_string(&path).map_err(|e| {
            SimError::Config(format!("missing run output {}: {}", path.display(), e))
        })?;
        let s: RunSummary = serde_json::from_str(&text).map_err(config_err)?;
        rows.push(s);
    }
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<10} {:>15} {:>22}",
        "approach", "scenario", "final test loss", "avg round time (s)"
    );
    for s in &rows {
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>15.4} {:>22.6}",
            s.topology,
            if s.attacked { "attacked" } else { "normal" },
            s.final_test_loss,
            s.avg_round_time_s
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json(topology: &str) -> String {
        format!(
            r#"{{"topology": "{}", "node_count": 9, "shard_count": 3, "clients_per_shard": 2,
                "cycles": 1, "seed": 4, "blobs_per_class": 6, "blobs_side": 8}}"#,
            topology
        )
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let text = r#"{"topology": "ssfl", "node_count": 9, "seed": 1, "cylces": 3}"#;
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(err.to_string().contains("cylces"), "{}", err);
    }

    #[test]
    fn sharded_node_count_checked() {
        let text = r#"{"topology": "ssfl", "node_count": 8, "shard_count": 3,
                        "clients_per_shard": 2, "seed": 1}"#;
        assert!(RunConfig::from_json(text).is_err());
    }

    #[test]
    fn top_k_band_warns_but_passes() {
        let cfg = RunConfig::from_json(&minimal_json("bsfl")).unwrap();
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("top_k"));
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_json(&minimal_json("ssfl")).unwrap();
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.patience, Some(3));
        assert_eq!(cfg.rounds_per_cycle, 1);
        assert!(!cfg.attacked()); // fraction defaults to zero
    }

    #[test]
    fn explicit_null_patience_disables_early_stop() {
        let text = r#"{"topology": "sfl", "node_count": 3, "seed": 1, "patience": null}"#;
        let cfg = RunConfig::from_json(text).unwrap();
        assert_eq!(cfg.patience, None);
    }
}
