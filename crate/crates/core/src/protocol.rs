//! Batch-level split-training exchange between one shard server and its
//! clients, expressed as explicit messages.
//!
//! Per batch a client sends activations plus labels up, the server runs the
//! rest of the model, updates its per-client weight copy, and returns the
//! gradient at the cut. At round end the per-client server copies are
//! averaged and reset. Every client owns a private server copy until that
//! closing average, so any client processing order yields the same
//! post-round state.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::data::Dataset;
use crate::nn::layers::LayerSpec;
use crate::nn::ops::{backward, forward, ForwardCache};
use crate::nn::tensor::Tensor;
use crate::nn::weights::{fedavg, sgd_step_inplace, Weights};
use crate::nn::{loss_ce, NnError};
use crate::rng;

/// Fixed per-message envelope size used by the byte accounting.
pub const MSG_HEADER_BYTES: u64 = 32;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("client {0} is not enrolled on this shard server")]
    UnknownClient(u64),
    #[error("shard has no clients")]
    EmptyShard,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Activations and labels for one batch, client to server.
#[derive(Debug, Clone)]
pub struct ActivationMsg {
    pub client_id: u64,
    pub round: u64,
    pub batch_index: u64,
    pub activations: Tensor,
    pub labels: Vec<u8>,
    pub byte_size: u64,
}

impl ActivationMsg {
    pub fn accounted_bytes(activations: &Tensor, labels: &[u8]) -> u64 {
        activations.data.len() as u64 * 4 + labels.len() as u64 + MSG_HEADER_BYTES
    }
}

/// Gradient at the cut, server back to client.
#[derive(Debug, Clone)]
pub struct GradientMsg {
    pub client_id: u64,
    pub round: u64,
    pub batch_index: u64,
    pub cut_gradient: Tensor,
    pub byte_size: u64,
}

impl GradientMsg {
    pub fn accounted_bytes(cut_gradient: &Tensor) -> u64 {
        cut_gradient.data.len() as u64 * 4 + MSG_HEADER_BYTES
    }
}

/// One client: its model segment, weights, data slice and step size.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u64,
    pub layers: Vec<LayerSpec>,
    pub weights: Weights,
    pub slice: Dataset,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub poisoned: bool,
}

impl ClientState {
    pub fn new(
        client_id: u64,
        layers: Vec<LayerSpec>,
        weights: Weights,
        slice: Dataset,
        learning_rate: f32,
        batch_size: usize,
    ) -> Self {
        Self { client_id, layers, weights, slice, learning_rate, batch_size, poisoned: false }
    }
}

/// Shard server: one private server-segment weight copy per enrolled
/// client, updated independently within a round.
#[derive(Debug, Clone)]
pub struct ShardServerState {
    pub server_id: u64,
    pub layers: Vec<LayerSpec>,
    pub per_client: BTreeMap<u64, Weights>,
    pub learning_rate: f32,
}

impl ShardServerState {
    pub fn new(
        server_id: u64,
        layers: Vec<LayerSpec>,
        weights: Weights,
        client_ids: &[u64],
        learning_rate: f32,
    ) -> Self {
        let per_client = client_ids.iter().map(|&id| (id, weights.clone())).collect();
        Self { server_id, layers, per_client, learning_rate }
    }

    /// The shard-level model. All copies are equal right after a round's
    /// closing average, so any copy serves. Panics on an empty shard.
    pub fn shard_model(&self) -> &Weights {
        self.per_client.values().next().expect("shard has clients")
    }

    /// Averages the per-client copies (ascending client id) and resets
    /// every copy to the average.
    pub fn average_and_reset(&mut self) -> Result<Weights, ProtocolError> {
        let copies: Vec<Weights> = self.per_client.values().cloned().collect();
        if copies.is_empty() {
            return Err(ProtocolError::EmptyShard);
        }
        let avg = fedavg(&copies)?;
        for copy in self.per_client.values_mut() {
            *copy = avg.clone();
        }
        Ok(avg)
    }
}

/// Client-side forward pass for one batch.
pub fn client_train_batch(
    cs: &ClientState,
    round: u64,
    batch_index: u64,
    x: &Tensor,
    labels: Vec<u8>,
) -> Result<(ActivationMsg, ForwardCache), ProtocolError> {
    let (activations, cache) = forward(&cs.layers, &cs.weights, x)?;
    let byte_size = ActivationMsg::accounted_bytes(&activations, &labels);
    Ok((
        ActivationMsg { client_id: cs.client_id, round, batch_index, activations, labels, byte_size },
        cache,
    ))
}

/// Server side of one batch: forward the received activations, update the
/// sender's server copy, and return the cut gradient plus the batch loss.
pub fn server_process_batch(
    ss: &mut ShardServerState,
    msg: &ActivationMsg,
) -> Result<(GradientMsg, f32), ProtocolError> {
    let weights = ss
        .per_client
        .get_mut(&msg.client_id)
        .ok_or(ProtocolError::UnknownClient(msg.client_id))?;
    let (logits, cache) = forward(&ss.layers, weights, &msg.activations)?;
    let (loss, grad_logits) = loss_ce(&logits, &msg.labels)?;
    let grads = backward(&ss.layers, weights, &cache, &grad_logits)?;
    sgd_step_inplace(weights, &grads, ss.learning_rate)?;
    let byte_size = GradientMsg::accounted_bytes(&grads.input_grad);
    Ok((
        GradientMsg {
            client_id: msg.client_id,
            round: msg.round,
            batch_index: msg.batch_index,
            cut_gradient: grads.input_grad,
            byte_size,
        },
        loss,
    ))
}

/// Client-side backward: backpropagate the cut gradient and step.
pub fn client_backprop(
    cs: &mut ClientState,
    cache: &ForwardCache,
    msg: &GradientMsg,
) -> Result<(), ProtocolError> {
    let grads = backward(&cs.layers, &cs.weights, cache, &msg.cut_gradient)?;
    sgd_step_inplace(&mut cs.weights, &grads, cs.learning_rate)?;
    Ok(())
}

/// Wire and compute accounting for one client's stream within a round.
#[derive(Debug, Clone, Default)]
pub struct StreamStats {
    pub client_id: u64,
    pub batches: u64,
    pub messages: u64,
    pub bytes: u64,
    pub client_macs: u64,
    pub server_macs: u64,
    pub examples: u64,
    pub loss_sum: f64,
}

impl StreamStats {
    pub fn mean_loss(&self) -> f32 {
        if self.batches == 0 {
            0.0
        } else {
            (self.loss_sum / self.batches as f64) as f32
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RoundStats {
    pub streams: Vec<StreamStats>,
}

impl RoundStats {
    pub fn total_messages(&self) -> u64 {
        self.streams.iter().map(|s| s.messages).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.streams.iter().map(|s| s.bytes).sum()
    }

    pub fn mean_loss(&self) -> f32 {
        let batches: u64 = self.streams.iter().map(|s| s.batches).sum();
        if batches == 0 {
            return 0.0;
        }
        (self.streams.iter().map(|s| s.loss_sum).sum::<f64>() / batches as f64) as f32
    }
}

/// Per-example forward/backward MAC costs of a layer slice.
pub fn segment_macs(layers: &[LayerSpec], input: &crate::nn::tensor::TensorShape) -> (u64, u64) {
    let mut shape = input.clone();
    let mut fwd = 0u64;
    let mut bwd = 0u64;
    for layer in layers {
        fwd += layer.forward_macs(&shape);
        bwd += layer.backward_macs(&shape);
        shape = layer.output_shape(&shape).expect("validated layer chain");
    }
    (fwd, bwd)
}

/// Runs `epochs` passes over every client's slice against the shard
/// server, then applies the closing average. Clients iterate their slice
/// in a seed-fixed shuffled order per epoch; the last partial batch is
/// kept. `global_round` keys the shuffles so identical configurations
/// replay identically across topologies.
pub fn run_shard_round(
    ss: &mut ShardServerState,
    clients: &mut [ClientState],
    epochs: usize,
    master_seed: u64,
    global_round: u64,
) -> Result<RoundStats, ProtocolError> {
    if clients.is_empty() {
        return Err(ProtocolError::EmptyShard);
    }
    let mut stats = RoundStats::default();
    for cs in clients.iter_mut() {
        stats.streams.push(run_client_stream(ss, cs, epochs, master_seed, global_round)?);
    }
    ss.average_and_reset()?;
    Ok(stats)
}

/// One client's full round against the server (no closing average).
pub fn run_client_stream(
    ss: &mut ShardServerState,
    cs: &mut ClientState,
    epochs: usize,
    master_seed: u64,
    global_round: u64,
) -> Result<StreamStats, ProtocolError> {
    use rand::seq::SliceRandom;
    let input_shape = cs.slice.shape.clone();
    let (client_fwd, client_bwd) = segment_macs(&cs.layers, &input_shape);
    let cut_shape = {
        let mut shape = input_shape.clone();
        for layer in &cs.layers {
            shape = layer.output_shape(&shape)?;
        }
        shape
    };
    let (server_fwd, server_bwd) = segment_macs(&ss.layers, &cut_shape);

    let mut stats = StreamStats { client_id: cs.client_id, ..Default::default() };
    let mut batch_index = 0u64;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..cs.slice.len()).collect();
        let mut r = rng::stream(
            master_seed,
            "batch-shuffle",
            &[cs.client_id, global_round, epoch as u64],
        );
        order.shuffle(&mut r);
        for chunk in order.chunks(cs.batch_size) {
            let (x, labels) = cs.slice.batch(chunk);
            let (act_msg, cache) = client_train_batch(cs, global_round, batch_index, &x, labels)?;
            let (grad_msg, loss) = server_process_batch(ss, &act_msg)?;
            client_backprop(cs, &cache, &grad_msg)?;
            let n = chunk.len() as u64;
            stats.batches += 1;
            stats.messages += 2;
            stats.bytes += act_msg.byte_size + grad_msg.byte_size;
            stats.client_macs += n * (client_fwd + client_bwd);
            stats.server_macs += n * (server_fwd + server_bwd);
            stats.examples += n;
            stats.loss_sum += loss as f64;
            batch_index += 1;
        }
    }
    Ok(stats)
}

/// Mean cross-entropy and accuracy of a split pair on a dataset.
pub fn evaluate_pair(
    client_layers: &[LayerSpec],
    client_weights: &Weights,
    server_layers: &[LayerSpec],
    server_weights: &Weights,
    ds: &Dataset,
    batch_size: usize,
) -> Result<(f32, f32), ProtocolError> {
    let mut loss_sum = 0.0f64;
    let mut hit_sum = 0.0f64;
    let mut total = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = ds.batch(chunk);
        let (act, _) = forward(client_layers, client_weights, &x)?;
        let (logits, _) = forward(server_layers, server_weights, &act)?;
        let (loss, _) = loss_ce(&logits, &labels)?;
        loss_sum += loss as f64 * chunk.len() as f64;
        hit_sum += crate::nn::accuracy(&logits, &labels) as f64 * chunk.len() as f64;
        total += chunk.len();
    }
    let n = total.max(1) as f64;
    Ok(((loss_sum / n) as f32, (hit_sum / n) as f32))
}
