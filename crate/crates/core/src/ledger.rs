//! Simulated append-only ledger with the three contract kinds and the
//! committee training cycle: election with mandatory rotation, sharded
//! split training, cross-evaluation with median scoring, top-K
//! aggregation, and hash-linked blocks over content-addressed payloads.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attacks::{malicious_vote, AttackPlan};
use crate::cost::{
    aggregation_time, evaluation_time, ledger_time, parallel_round_time, CostModel, RoundTime,
};
use crate::data::Dataset;
use crate::nn::weights::{fedavg, init_model, split, Weights};
use crate::nn::{serialize, ModelSpec, NnError};
use crate::protocol::{evaluate_pair, run_shard_round, ClientState, ProtocolError, RoundStats, ShardServerState};
use crate::rng;
use crate::topology::{early_stop, HistoryRow, TopologyConfig, TopologyError, TrainHistory, EVAL_BATCH};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("cannot rotate: only {eligible} nodes eligible for a committee of {committee}")]
    ImpossibleRotation { eligible: usize, committee: usize },
    #[error("top-K of {k} exceeds the {shards} available shards")]
    KTooLarge { k: usize, shards: usize },
    #[error("shard {0} is missing evaluations")]
    MissingEvaluations(u64),
    #[error("a block needs at least one event")]
    EmptyBlock,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
}

/// What a shard evaluation reports and how scores are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMetric {
    /// Validation loss; lower is better.
    Loss,
    /// Validation accuracy; higher is better.
    Accuracy,
}

impl EvalMetric {
    /// Ordering key: smaller keys are better under either metric.
    fn key(&self, score: f32) -> f32 {
        match self {
            EvalMetric::Loss => score,
            EvalMetric::Accuracy => -score,
        }
    }
}

// ---------------------------------------------------------------------------
// Node bookkeeping and committee election
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Committee,
    Client,
    Idle,
}

#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub node_id: u64,
    pub honest: bool,
    pub last_score: Option<f32>,
    pub role: Role,
}

/// One cycle's shard layout: shard k is served by `shards[k].server`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub cycle: u64,
    pub shards: Vec<ShardAssignment>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    pub server: u64,
    pub clients: Vec<u64>,
}

impl Assignment {
    pub fn committee(&self) -> Vec<u64> {
        self.shards.iter().map(|s| s.server).collect()
    }

    pub fn members_of(&self, shard: usize) -> Vec<u64> {
        let mut m = vec![self.shards[shard].server];
        m.extend(&self.shards[shard].clients);
        m
    }
}

/// Elects the committee and deals clients into shards.
///
/// Cycle 0 picks the committee uniformly at random and deals clients in a
/// seeded random order. Later cycles elect the best-scoring nodes that
/// were not on the previous committee (previous members always return as
/// clients) and group adjacent score ranks into the same shard, pairing
/// the best-ranked server with the best-ranked client group.
pub fn assign_nodes(
    cycle: u64,
    nodes: &[NodeRecord],
    prev_committee: &BTreeSet<u64>,
    shard_count: usize,
    clients_per_shard: usize,
    metric: EvalMetric,
    master_seed: u64,
) -> Result<Assignment, LedgerError> {
    use rand::seq::SliceRandom;
    let client_slots = shard_count * clients_per_shard;

    let committee: Vec<u64> = if cycle == 0 {
        let mut ids: Vec<u64> = nodes.iter().map(|n| n.node_id).collect();
        ids.shuffle(&mut rng::stream(master_seed, "assign-committee", &[cycle]));
        let mut chosen: Vec<u64> = ids.into_iter().take(shard_count).collect();
        chosen.sort_unstable();
        chosen
    } else {
        let mut eligible: Vec<&NodeRecord> =
            nodes.iter().filter(|n| !prev_committee.contains(&n.node_id)).collect();
        if eligible.len() < shard_count {
            return Err(LedgerError::ImpossibleRotation {
                eligible: eligible.len(),
                committee: shard_count,
            });
        }
        eligible.sort_by(|a, b| score_order(a, b, metric));
        eligible[..shard_count].iter().map(|n| n.node_id).collect()
    };
    let committee_set: BTreeSet<u64> = committee.iter().copied().collect();

    // client pool: previous committee members come back as clients first,
    // then the remaining nodes by score; overflow past the slots sits idle
    let mut pool: Vec<&NodeRecord> =
        nodes.iter().filter(|n| !committee_set.contains(&n.node_id)).collect();
    let clients: Vec<u64> = if cycle == 0 {
        let mut ids: Vec<u64> = pool.iter().map(|n| n.node_id).collect();
        ids.shuffle(&mut rng::stream(master_seed, "assign-clients", &[cycle]));
        ids.into_iter().take(client_slots).collect()
    } else {
        pool.sort_by(|a, b| {
            let a_prev = prev_committee.contains(&a.node_id);
            let b_prev = prev_committee.contains(&b.node_id);
            b_prev.cmp(&a_prev).then_with(|| score_order(a, b, metric))
        });
        let mut chosen: Vec<&NodeRecord> = pool.into_iter().take(client_slots).collect();
        chosen.sort_by(|a, b| score_order(a, b, metric));
        chosen.into_iter().map(|n| n.node_id).collect()
    };

    // committee ordered by the same rank so adjacent groups pair up
    let mut ranked_committee: Vec<&NodeRecord> = nodes
        .iter()
        .filter(|n| committee_set.contains(&n.node_id))
        .collect();
    ranked_committee.sort_by(|a, b| score_order(a, b, metric));

    let shards = ranked_committee
        .iter()
        .zip(clients.chunks(clients_per_shard))
        .map(|(server, group)| ShardAssignment { server: server.node_id, clients: group.to_vec() })
        .collect();
    Ok(Assignment { cycle, shards })
}

fn score_order(a: &NodeRecord, b: &NodeRecord, metric: EvalMetric) -> std::cmp::Ordering {
    let ka = a.last_score.map(|s| metric.key(s));
    let kb = b.last_score.map(|s| metric.key(s));
    match (ka, kb) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap().then(a.node_id.cmp(&b.node_id)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.node_id.cmp(&b.node_id),
    }
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Median with the even-count convention (mean of the two middle values).
pub fn median(values: &[f32]) -> f32 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Per-client path scores of one shard on the evaluator's local data:
/// each client model composed with the shard's server model.
pub fn evaluate_paths(
    evaluator_data: &Dataset,
    spec: &ModelSpec,
    server_weights: &Weights,
    client_models: &[Weights],
    metric: EvalMetric,
) -> Result<Vec<f32>, LedgerError> {
    assert!(!client_models.is_empty());
    let mut per_client = Vec::with_capacity(client_models.len());
    for wc in client_models {
        let (loss, acc) = evaluate_pair(
            spec.client_layers(),
            wc,
            spec.server_layers(),
            server_weights,
            evaluator_data,
            EVAL_BATCH,
        )?;
        per_client.push(match metric {
            EvalMetric::Loss => loss,
            EvalMetric::Accuracy => acc,
        });
    }
    Ok(per_client)
}

/// One committee member's score for one shard: the median over the
/// shard's per-client path values on the evaluator's local data.
pub fn evaluate(
    evaluator_data: &Dataset,
    spec: &ModelSpec,
    server_weights: &Weights,
    client_models: &[Weights],
    metric: EvalMetric,
) -> Result<f32, LedgerError> {
    Ok(median(&evaluate_paths(evaluator_data, spec, server_weights, client_models, metric)?))
}

/// Raw and finalized scores for one cycle.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    /// Per shard: (server id, per-evaluator raw scores, final median).
    pub entries: Vec<ScoreEntry>,
    pub winners: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct ScoreEntry {
    pub server_id: u64,
    pub raw: Vec<(u64, f32)>,
    pub final_score: f32,
}

/// Final score per shard: the median of its evaluators' raw scores.
/// Every shard must have been scored by all other committee members.
pub fn finalize_scores(
    raw: &BTreeMap<u64, Vec<(u64, f32)>>,
    evaluators: usize,
) -> Result<Vec<ScoreEntry>, LedgerError> {
    let mut entries = Vec::with_capacity(raw.len());
    for (&server_id, scores) in raw {
        if scores.len() != evaluators {
            return Err(LedgerError::MissingEvaluations(server_id));
        }
        let values: Vec<f32> = scores.iter().map(|&(_, s)| s).collect();
        entries.push(ScoreEntry { server_id, raw: scores.clone(), final_score: median(&values) });
    }
    Ok(entries)
}

/// The K best-scored shards; ties break toward the lower server node id.
pub fn select_top_k(
    entries: &[ScoreEntry],
    k: usize,
    metric: EvalMetric,
) -> Result<Vec<u64>, LedgerError> {
    if k > entries.len() {
        return Err(LedgerError::KTooLarge { k, shards: entries.len() });
    }
    let mut order: Vec<&ScoreEntry> = entries.iter().collect();
    order.sort_by(|a, b| {
        metric
            .key(a.final_score)
            .partial_cmp(&metric.key(b.final_score))
            .unwrap()
            .then(a.server_id.cmp(&b.server_id))
    });
    let mut winners: Vec<u64> = order[..k].iter().map(|e| e.server_id).collect();
    winners.sort_unstable();
    Ok(winners)
}

/// Equal-weight means over the winning shards' server models and over all
/// their client models, in ascending server id then client id order.
pub fn aggregate_top_k(
    winners: &[u64],
    shard_models: &BTreeMap<u64, (Weights, Vec<(u64, Weights)>)>,
) -> Result<(Weights, Weights), LedgerError> {
    let mut servers = Vec::with_capacity(winners.len());
    let mut clients = Vec::new();
    for id in winners {
        let (ws, wcs) = shard_models.get(id).expect("winner has models");
        servers.push(ws.clone());
        for (_, wc) in wcs {
            clients.push(wc.clone());
        }
    }
    Ok((fedavg(&servers)?, fedavg(&clients)?))
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    AssignNodes,
    ModelPropose,
    EvaluationPropose,
}

impl EventKind {
    pub fn name(&self) -> &'static str {
        match self {
            EventKind::AssignNodes => "AssignNodes",
            EventKind::ModelPropose => "ModelPropose",
            EventKind::EvaluationPropose => "EvaluationPropose",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            EventKind::AssignNodes => 1,
            EventKind::ModelPropose => 2,
            EventKind::EvaluationPropose => 3,
        }
    }
}

pub type Digest32 = [u8; 32];

#[derive(Debug, Clone)]
pub struct ContractEvent {
    pub kind: EventKind,
    pub cycle: u64,
    pub digest: Digest32,
    /// Human-oriented pointer, e.g. `server-model/3` or `scores`.
    pub payload_ref: String,
}

#[derive(Debug, Clone)]
pub struct LedgerBlock {
    pub height: u64,
    pub previous_hash: Digest32,
    pub events: Vec<ContractEvent>,
    pub state_hash: Digest32,
}

impl LedgerBlock {
    /// Hash over the canonical block encoding.
    pub fn block_hash(&self) -> Digest32 {
        let mut h = Sha256::new();
        h.update(self.height.to_le_bytes());
        h.update(self.previous_hash);
        h.update(self.state_hash);
        h.update((self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            h.update([e.kind.tag()]);
            h.update(e.cycle.to_le_bytes());
            h.update(e.digest);
        }
        h.finalize().into()
    }
}

pub fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

/// Append-only chain plus its content-addressed payload store.
#[derive(Debug, Clone, Default)]
pub struct Chain {
    pub blocks: Vec<LedgerBlock>,
    pub payloads: BTreeMap<Digest32, Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainViolation {
    pub height: u64,
    pub reason: String,
}

impl Chain {
    pub fn put_payload(&mut self, bytes: Vec<u8>) -> Digest32 {
        let digest = sha256(&bytes);
        self.payloads.entry(digest).or_insert(bytes);
        digest
    }

    /// Links a new block to the tip. The genesis block has height 0 and an
    /// all-zero previous hash.
    pub fn append_block(
        &mut self,
        events: Vec<ContractEvent>,
        state_hash: Digest32,
    ) -> Result<&LedgerBlock, LedgerError> {
        if events.is_empty() {
            return Err(LedgerError::EmptyBlock);
        }
        let previous_hash =
            self.blocks.last().map(|b| b.block_hash()).unwrap_or([0u8; 32]);
        let block = LedgerBlock {
            height: self.blocks.len() as u64,
            previous_hash,
            events,
            state_hash,
        };
        self.blocks.push(block);
        Ok(self.blocks.last().unwrap())
    }

    /// Recomputes hash links and every event's payload digest; reports the
    /// first bad height.
    pub fn verify(&self) -> Result<(), ChainViolation> {
        let mut expected_prev = [0u8; 32];
        for block in &self.blocks {
            if block.previous_hash != expected_prev {
                return Err(ChainViolation {
                    height: block.height,
                    reason: "previous-hash link broken".into(),
                });
            }
            for event in &block.events {
                match self.payloads.get(&event.digest) {
                    None => {
                        return Err(ChainViolation {
                            height: block.height,
                            reason: format!("missing payload {}", hex::encode(event.digest)),
                        })
                    }
                    Some(bytes) => {
                        if sha256(bytes) != event.digest {
                            return Err(ChainViolation {
                                height: block.height,
                                reason: format!(
                                    "payload digest mismatch for {}",
                                    event.payload_ref
                                ),
                            });
                        }
                    }
                }
            }
            expected_prev = block.block_hash();
        }
        Ok(())
    }
}

fn encode_assignment(a: &Assignment) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&a.cycle.to_le_bytes());
    out.extend_from_slice(&(a.shards.len() as u32).to_le_bytes());
    for shard in &a.shards {
        out.extend_from_slice(&shard.server.to_le_bytes());
        out.extend_from_slice(&(shard.clients.len() as u32).to_le_bytes());
        for c in &shard.clients {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    out
}

fn encode_scores(cycle: u64, table: &ScoreTable) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&cycle.to_le_bytes());
    out.extend_from_slice(&(table.entries.len() as u32).to_le_bytes());
    for e in &table.entries {
        out.extend_from_slice(&e.server_id.to_le_bytes());
        out.extend_from_slice(&(e.raw.len() as u32).to_le_bytes());
        for &(ev, s) in &e.raw {
            out.extend_from_slice(&ev.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
        out.extend_from_slice(&e.final_score.to_le_bytes());
    }
    out.extend_from_slice(&(table.winners.len() as u32).to_le_bytes());
    for w in &table.winners {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

/// SHA-256 over the canonical serialization of both globals plus the
/// cycle's score table.
pub fn state_hash(ws: &Weights, wc: &Weights, cycle: u64, table: &ScoreTable) -> Digest32 {
    let mut h = Sha256::new();
    h.update(serialize(ws));
    h.update(serialize(wc));
    h.update(encode_scores(cycle, table));
    h.finalize().into()
}

// ---------------------------------------------------------------------------
// The ledger-backed training loop
// ---------------------------------------------------------------------------

/// Everything a committee cycle produced before aggregation.
pub struct CycleOutcome {
    pub shard_models: BTreeMap<u64, (Weights, Vec<(u64, Weights)>)>,
    pub round_stats: Vec<Vec<RoundStats>>,
    pub score_table: ScoreTable,
    pub model_events: Vec<ContractEvent>,
    pub train_time: RoundTime,
}

/// Runs one committee cycle: every shard trains `R` rounds from the
/// globals, proposes its models, and is scored by the other committee
/// members on their own local data.
#[allow(clippy::too_many_arguments)]
pub fn run_bsfl_cycle(
    t: u64,
    assignment: &Assignment,
    ws_global: &Weights,
    wc_global: &Weights,
    spec: &ModelSpec,
    partitions: &[Dataset],
    cfg: &TopologyConfig,
    plan: &AttackPlan,
    metric: EvalMetric,
    cost: &CostModel,
    chain: &mut Chain,
) -> Result<CycleOutcome, LedgerError> {
    // train every shard from the globals
    let mut shard_models = BTreeMap::new();
    let mut round_stats: Vec<Vec<RoundStats>> = vec![Vec::new(); cfg.rounds_per_cycle];
    let mut train_time = RoundTime::default();
    let mut per_shard_states = Vec::new();
    for shard in &assignment.shards {
        let server = ShardServerState::new(
            shard.server,
            spec.server_layers().to_vec(),
            ws_global.clone(),
            &shard.clients,
            cfg.learning_rate,
        );
        let clients: Vec<ClientState> = shard
            .clients
            .iter()
            .map(|&id| {
                ClientState::new(
                    id,
                    spec.client_layers().to_vec(),
                    wc_global.clone(),
                    partitions[id as usize].clone(),
                    cfg.learning_rate,
                    cfg.batch_size,
                )
            })
            .collect();
        per_shard_states.push((server, clients));
    }
    for r in 0..cfg.rounds_per_cycle {
        let g = t * cfg.rounds_per_cycle as u64 + r as u64;
        let mut stats_this_round = Vec::new();
        for (server, clients) in per_shard_states.iter_mut() {
            stats_this_round.push(run_shard_round(server, clients, cfg.epochs, cfg.seed, g)?);
        }
        let refs: Vec<&RoundStats> = stats_this_round.iter().collect();
        let rt = parallel_round_time(&refs, 0, cost);
        train_time.compute_s += rt.compute_s;
        train_time.comm_s += rt.comm_s;
        round_stats[r] = stats_this_round;
    }

    // model proposals, content addressed
    let mut model_events = Vec::new();
    for (server, clients) in &per_shard_states {
        let ws = server.shard_model().clone();
        let digest = chain.put_payload(serialize(&ws));
        model_events.push(ContractEvent {
            kind: EventKind::ModelPropose,
            cycle: t,
            digest,
            payload_ref: format!("server-model/{}", server.server_id),
        });
        let mut wcs = Vec::new();
        for c in clients {
            let digest = chain.put_payload(serialize(&c.weights));
            model_events.push(ContractEvent {
                kind: EventKind::ModelPropose,
                cycle: t,
                digest,
                payload_ref: format!("client-model/{}", c.client_id),
            });
            wcs.push((c.client_id, c.weights.clone()));
        }
        shard_models.insert(server.server_id, (ws, wcs));
    }

    // cross-evaluation: each committee member scores every other shard on
    // its own local slice; a vote-flipping member inverts its vector
    let committee = assignment.committee();
    let mut raw: BTreeMap<u64, Vec<(u64, f32)>> = BTreeMap::new();
    let mut max_member_eval_macs = 0u64;
    for &evaluator in &committee {
        let data = &partitions[evaluator as usize];
        let mut targets = Vec::new();
        let mut true_scores = Vec::new();
        let (client_fwd, _) = crate::protocol::segment_macs(spec.client_layers(), &spec.input_shape);
        let (server_fwd, _) =
            crate::protocol::segment_macs(spec.server_layers(), &spec.cut_shape()?);
        let mut member_macs = 0u64;
        for shard in &assignment.shards {
            if shard.server == evaluator {
                continue;
            }
            let (ws, wcs) = &shard_models[&shard.server];
            let models: Vec<Weights> = wcs.iter().map(|(_, w)| w.clone()).collect();
            let score = evaluate(data, spec, ws, &models, metric)?;
            member_macs += models.len() as u64 * data.len() as u64 * (client_fwd + server_fwd);
            targets.push(shard.server);
            true_scores.push(score);
        }
        max_member_eval_macs = max_member_eval_macs.max(member_macs);
        let reported = if plan.votes_maliciously() && plan.is_malicious(evaluator) {
            malicious_vote(&true_scores)
        } else {
            true_scores
        };
        for (&target, &score) in targets.iter().zip(&reported) {
            raw.entry(target).or_default().push((evaluator, score));
        }
    }
    let entries = finalize_scores(&raw, committee.len() - 1)?;
    let score_table = ScoreTable { entries, winners: Vec::new() };
    train_time.eval_s += evaluation_time(max_member_eval_macs, cost);

    Ok(CycleOutcome { shard_models, round_stats, score_table, model_events, train_time })
}

/// Chain artifacts of a full run.
pub struct BsflRun {
    pub history: TrainHistory,
    pub chain: Chain,
    pub assignments: Vec<Assignment>,
    pub node_records: Vec<NodeRecord>,
}

/// The full ledger-backed loop: elect, train, score, select, aggregate,
/// commit; early-stops on the median of the winning shards' final scores.
#[allow(clippy::too_many_arguments)]
pub fn run_bsfl(
    cfg: &TopologyConfig,
    spec: &ModelSpec,
    partitions: &[Dataset],
    validation: &Dataset,
    cost: &CostModel,
    plan: &AttackPlan,
    metric: EvalMetric,
    top_k: usize,
) -> Result<BsflRun, LedgerError> {
    cfg.validate_sharded()?;
    if top_k == 0 || top_k > cfg.shard_count {
        return Err(LedgerError::KTooLarge { k: top_k, shards: cfg.shard_count });
    }
    let full = init_model(spec, rng::mix(cfg.seed, "model-init", &[]))?;
    let (mut wc_global, mut ws_global) = split(spec, &full)?;

    let mut nodes: Vec<NodeRecord> = (0..cfg.node_count as u64)
        .map(|node_id| NodeRecord {
            node_id,
            honest: !plan.is_malicious(node_id),
            last_score: None,
            role: Role::Idle,
        })
        .collect();
    let mut prev_committee: BTreeSet<u64> = BTreeSet::new();
    let mut chain = Chain::default();
    let mut assignments = Vec::new();
    let mut rows: Vec<HistoryRow> = Vec::new();
    let mut stop_scores: Vec<f32> = Vec::new();
    let mut early = false;

    let server_bytes = serialize(&ws_global).len() as u64;
    let client_bytes = serialize(&wc_global).len() as u64;
    let server_param_count: u64 =
        spec.server_layers().iter().map(|l| l.param_count() as u64).sum();
    let client_param_count: u64 =
        spec.client_layers().iter().map(|l| l.param_count() as u64).sum();

    for t in 0..cfg.cycles as u64 {
        let assignment = assign_nodes(
            t,
            &nodes,
            &prev_committee,
            cfg.shard_count,
            cfg.clients_per_shard,
            metric,
            cfg.seed,
        )?;
        let assign_digest = chain.put_payload(encode_assignment(&assignment));

        let mut outcome = run_bsfl_cycle(
            t,
            &assignment,
            &ws_global,
            &wc_global,
            spec,
            partitions,
            cfg,
            plan,
            metric,
            cost,
            &mut chain,
        )?;

        let winners = select_top_k(&outcome.score_table.entries, top_k, metric)?;
        outcome.score_table.winners = winners.clone();
        let (new_ws, new_wc) = aggregate_top_k(&winners, &outcome.shard_models)?;
        ws_global = new_ws;
        wc_global = new_wc;

        // node bookkeeping: every shard member inherits the shard's final
        // score; roles recorded for the cycle
        for n in nodes.iter_mut() {
            n.role = Role::Idle;
        }
        for (shard_idx, shard) in assignment.shards.iter().enumerate() {
            let final_score = outcome
                .score_table
                .entries
                .iter()
                .find(|e| e.server_id == shard.server)
                .expect("scored shard")
                .final_score;
            for member in assignment.members_of(shard_idx) {
                let rec = &mut nodes[member as usize];
                rec.last_score = Some(final_score);
                rec.role = if member == shard.server { Role::Committee } else { Role::Client };
            }
        }
        prev_committee = assignment.committee().into_iter().collect();

        // commit the block
        let scores_digest = chain.put_payload(encode_scores(t, &outcome.score_table));
        let mut events = vec![ContractEvent {
            kind: EventKind::AssignNodes,
            cycle: t,
            digest: assign_digest,
            payload_ref: "assignment".into(),
        }];
        events.extend(outcome.model_events.clone());
        events.push(ContractEvent {
            kind: EventKind::EvaluationPropose,
            cycle: t,
            digest: scores_digest,
            payload_ref: "scores".into(),
        });
        let event_count = events.len() as u64;
        let committed_bytes = cfg.shard_count as u64 * server_bytes
            + (cfg.shard_count * cfg.clients_per_shard) as u64 * client_bytes;
        let state = state_hash(&ws_global, &wc_global, t, &outcome.score_table);
        chain.append_block(events, state)?;

        // cycle accounting
        let mut time = outcome.train_time;
        time.agg_s += aggregation_time(
            top_k as u64 * server_param_count
                + (top_k * cfg.clients_per_shard) as u64 * client_param_count,
            cost,
        );
        time.ledger_s += ledger_time(committed_bytes, event_count, cost);
        let messages: u64 = outcome
            .round_stats
            .iter()
            .flat_map(|r| r.iter())
            .map(|s| s.total_messages())
            .sum();
        let bytes: u64 = outcome
            .round_stats
            .iter()
            .flat_map(|r| r.iter())
            .map(|s| s.total_bytes())
            .sum();
        let (val_loss, val_acc) = evaluate_pair(
            spec.client_layers(),
            &wc_global,
            spec.server_layers(),
            &ws_global,
            validation,
            EVAL_BATCH,
        )?;
        rows.push(HistoryRow {
            cycle: t,
            round: 0,
            val_loss,
            val_acc,
            time,
            messages,
            bytes,
            winners: winners.clone(),
        });
        assignments.push(assignment);

        // protocol-internal early stopping: median of winning shards'
        // final scores, forced into minimize orientation
        let winner_scores: Vec<f32> = outcome
            .score_table
            .entries
            .iter()
            .filter(|e| winners.contains(&e.server_id))
            .map(|e| metric.key(e.final_score))
            .collect();
        stop_scores.push(median(&winner_scores));
        if let Some(p) = cfg.patience {
            if early_stop(&stop_scores, p) {
                early = true;
                break;
            }
        }
    }

    Ok(BsflRun {
        history: TrainHistory {
            rows,
            client_weights: wc_global,
            server_weights: ws_global,
            early_stopped: early,
        },
        chain,
        assignments,
        node_records: nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(node_id: u64, score: Option<f32>) -> NodeRecord {
        NodeRecord { node_id, honest: true, last_score: score, role: Role::Idle }
    }

    #[test]
    fn rotation_excludes_previous_committee() {
        let nodes: Vec<NodeRecord> = (0..9).map(|i| record(i, Some(0.5 + i as f32 * 0.01))).collect();
        let prev: BTreeSet<u64> = [0, 1, 2].into_iter().collect();
        let a = assign_nodes(1, &nodes, &prev, 3, 2, EvalMetric::Loss, 7).unwrap();
        let committee = a.committee();
        for c in &committee {
            assert!(!prev.contains(c));
        }
        // previous committee members all come back as clients
        let clients: BTreeSet<u64> =
            a.shards.iter().flat_map(|s| s.clients.iter().copied()).collect();
        for p in &prev {
            assert!(clients.contains(p), "{} not a client", p);
        }
    }

    #[test]
    fn first_cycle_is_seed_deterministic() {
        let nodes: Vec<NodeRecord> = (0..9).map(|i| record(i, None)).collect();
        let prev = BTreeSet::new();
        let a = assign_nodes(0, &nodes, &prev, 3, 2, EvalMetric::Loss, 7).unwrap();
        let b = assign_nodes(0, &nodes, &prev, 3, 2, EvalMetric::Loss, 7).unwrap();
        assert_eq!(a, b);
        let c = assign_nodes(0, &nodes, &prev, 3, 2, EvalMetric::Loss, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn election_takes_lowest_losses() {
        // scores: {3:0.2, 4:0.5, 5:0.3, 6:0.9, 7:0.4, 8:0.6}, prev {0,1,2}
        let scores = [
            (0u64, 0.7f32),
            (1, 0.7),
            (2, 0.7),
            (3, 0.2),
            (4, 0.5),
            (5, 0.3),
            (6, 0.9),
            (7, 0.4),
            (8, 0.6),
        ];
        let nodes: Vec<NodeRecord> = scores.iter().map(|&(i, s)| record(i, Some(s))).collect();
        let prev: BTreeSet<u64> = [0, 1, 2].into_iter().collect();
        let a = assign_nodes(1, &nodes, &prev, 3, 2, EvalMetric::Loss, 7).unwrap();
        let mut committee = a.committee();
        committee.sort_unstable();
        assert_eq!(committee, vec![3, 5, 7]);
    }

    #[test]
    fn grouping_pairs_adjacent_ranks() {
        let scores = [
            (0u64, 0.10f32),
            (1, 0.90),
            (2, 0.20),
            (3, 0.80),
            (4, 0.30),
            (5, 0.70),
            (6, 0.40),
            (7, 0.60),
            (8, 0.50),
        ];
        let nodes: Vec<NodeRecord> = scores.iter().map(|&(i, s)| record(i, Some(s))).collect();
        let prev: BTreeSet<u64> = [6, 7, 8].into_iter().collect();
        let a = assign_nodes(1, &nodes, &prev, 3, 2, EvalMetric::Loss, 7).unwrap();
        // eligible: {0:0.1, 1:0.9, 2:0.2, 3:0.8, 4:0.3, 5:0.7} -> committee {0,2,4}
        assert_eq!(a.committee(), vec![0, 2, 4]);
        // clients sorted by score: 6(0.4), 8(0.5), 7(0.6), 5(0.7), 3(0.8), 1(0.9)
        assert_eq!(a.shards[0].clients, vec![6, 8]);
        assert_eq!(a.shards[1].clients, vec![7, 5]);
        assert_eq!(a.shards[2].clients, vec![3, 1]);
    }

    #[test]
    fn impossible_rotation_is_an_error() {
        let nodes: Vec<NodeRecord> = (0..4).map(|i| record(i, Some(0.5))).collect();
        let prev: BTreeSet<u64> = [0, 1, 2].into_iter().collect();
        assert!(matches!(
            assign_nodes(1, &nodes, &prev, 3, 1, EvalMetric::Loss, 7),
            Err(LedgerError::ImpossibleRotation { eligible: 1, committee: 3 })
        ));
    }

    #[test]
    fn median_rules() {
        assert_eq!(median(&[0.2, 0.8, 0.5]), 0.5);
        assert_eq!(median(&[0.3, 0.31, 10.0]), 0.31);
        assert_eq!(median(&[0.2, 0.4, 0.6, 0.8]), 0.5);
        assert_eq!(median(&[1.0]), 1.0);
    }

    #[test]
    fn finalize_requires_full_evaluations() {
        let mut raw = BTreeMap::new();
        raw.insert(0u64, vec![(1u64, 0.3f32), (2, 0.4)]);
        raw.insert(1u64, vec![(0u64, 0.5f32)]);
        assert!(matches!(
            finalize_scores(&raw, 2),
            Err(LedgerError::MissingEvaluations(1))
        ));
        raw.get_mut(&1).unwrap().push((2, 0.7));
        let entries = finalize_scores(&raw, 2).unwrap();
        assert_eq!(entries.len(), 2);
        assert!((entries[0].final_score - 0.35).abs() < 1e-6);
    }

    #[test]
    fn top_k_selection_and_ties() {
        let entries = vec![
            ScoreEntry { server_id: 10, raw: vec![], final_score: 0.2 },
            ScoreEntry { server_id: 11, raw: vec![], final_score: 0.5 },
            ScoreEntry { server_id: 12, raw: vec![], final_score: 0.3 },
        ];
        assert_eq!(select_top_k(&entries, 2, EvalMetric::Loss).unwrap(), vec![10, 12]);
        assert_eq!(select_top_k(&entries, 3, EvalMetric::Loss).unwrap(), vec![10, 11, 12]);
        assert!(select_top_k(&entries, 4, EvalMetric::Loss).is_err());
        let tied = vec![
            ScoreEntry { server_id: 7, raw: vec![], final_score: 0.3 },
            ScoreEntry { server_id: 3, raw: vec![], final_score: 0.3 },
        ];
        assert_eq!(select_top_k(&tied, 1, EvalMetric::Loss).unwrap(), vec![3]);
        // accuracy flips the direction
        assert_eq!(select_top_k(&entries, 1, EvalMetric::Accuracy).unwrap(), vec![11]);
    }

    #[test]
    fn aggregate_reduces_to_fedavg() {
        use crate::nn::layers::LayerSpec;
        let layers = [LayerSpec::Linear { in_features: 2, out_features: 1 }];
        let mk = |v: f32| {
            let mut w = Weights::zeros_for(&layers);
            w.values = vec![v, v, v];
            w
        };
        let mut models = BTreeMap::new();
        models.insert(0u64, (mk(1.0), vec![(10u64, mk(3.0)), (11, mk(5.0))]));
        models.insert(1u64, (mk(3.0), vec![(12u64, mk(7.0)), (13, mk(9.0))]));
        let (ws, wc) = aggregate_top_k(&[0, 1], &models).unwrap();
        assert_eq!(ws.values, vec![2.0, 2.0, 2.0]);
        assert_eq!(wc.values, vec![6.0, 6.0, 6.0]);
        // single winner copies through
        let (ws1, wc1) = aggregate_top_k(&[0], &models).unwrap();
        assert_eq!(ws1.values, vec![1.0, 1.0, 1.0]);
        assert_eq!(wc1.values, vec![4.0, 4.0, 4.0]);
    }

    #[test]
    fn chain_verifies_and_pinpoints_corruption() {
        let mut chain = Chain::default();
        for height in 0..5u64 {
            let payload = format!("payload {}", height).into_bytes();
            let digest = chain.put_payload(payload);
            chain
                .append_block(
                    vec![ContractEvent {
                        kind: EventKind::ModelPropose,
                        cycle: height,
                        digest,
                        payload_ref: format!("p{}", height),
                    }],
                    [height as u8; 32],
                )
                .unwrap();
        }
        assert!(chain.verify().is_ok());
        // flip one byte of the payload committed at height 3
        let digest = chain.blocks[3].events[0].digest;
        chain.payloads.get_mut(&digest).unwrap()[0] ^= 1;
        let violation = chain.verify().unwrap_err();
        assert_eq!(violation.height, 3);
        // empty chain is vacuously fine
        assert!(Chain::default().verify().is_ok());
    }

    #[test]
    fn empty_block_rejected() {
        let mut chain = Chain::default();
        assert!(matches!(chain.append_block(vec![], [0u8; 32]), Err(LedgerError::EmptyBlock)));
    }
}
