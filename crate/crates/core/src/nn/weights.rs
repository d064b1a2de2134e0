//! Flat parameter vectors with a layout manifest.
//!
//! A [`Weights`] value is the unit of every aggregation and of ledger
//! storage. The manifest records one entry per parameter tensor
//! (layer index, dims, offset); offsets are contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerSpec, ModelSpec, CONV_KERNEL};
use super::tensor::{Tensor, TensorShape};
use super::NnError;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_index: u32,
    pub dims: Vec<u32>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f32>,
    pub manifest: Vec<ManifestEntry>,
}

/// Parameter gradients in the layout of the weights they differentiate,
/// plus the gradient at the segment input. The input gradient of the
/// server segment is what travels back across the cut to the client.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<f32>,
    pub manifest: Vec<ManifestEntry>,
    pub input_grad: Tensor,
}

impl Gradients {
    /// Gradients with no meaningful input component (tests, synthetic steps).
    pub fn param_only(values: Vec<f32>, manifest: Vec<ManifestEntry>) -> Self {
        Self { values, manifest, input_grad: Tensor::zeros(1, TensorShape::flat(1)) }
    }
}

fn manifest_for(layers: &[LayerSpec]) -> Vec<ManifestEntry> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for (i, layer) in layers.iter().enumerate() {
        let tensors: Vec<Vec<u32>> = match layer {
            LayerSpec::Conv2d { in_channels, out_channels } => vec![
                vec![*out_channels as u32, *in_channels as u32, CONV_KERNEL as u32, CONV_KERNEL as u32],
                vec![*out_channels as u32],
            ],
            LayerSpec::Linear { in_features, out_features } => {
                vec![vec![*out_features as u32, *in_features as u32], vec![*out_features as u32]]
            }
            _ => continue,
        };
        for dims in tensors {
            let len: usize = dims.iter().map(|&d| d as usize).product();
            entries.push(ManifestEntry { layer_index: i as u32, dims, offset });
            offset += len;
        }
    }
    entries
}

impl Weights {
    pub fn zeros_for(layers: &[LayerSpec]) -> Self {
        let manifest = manifest_for(layers);
        let total = manifest
            .last()
            .map(|e| e.offset + e.dims.iter().map(|&d| d as usize).product::<usize>())
            .unwrap_or(0);
        Self { values: vec![0.0; total], manifest }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &Weights) -> bool {
        self.manifest == other.manifest && self.values.len() == other.values.len()
    }

    /// Slice of the parameter tensor at manifest position `entry`.
    pub fn tensor(&self, entry: usize) -> &[f32] {
        let e = &self.manifest[entry];
        let len: usize = e.dims.iter().map(|&d| d as usize).product();
        &self.values[e.offset..e.offset + len]
    }

    /// Manifest positions belonging to the given layer index.
    pub fn entries_of_layer(&self, layer_index: usize) -> Vec<usize> {
        self.manifest
            .iter()
            .enumerate()
            .filter(|(_, e)| e.layer_index == layer_index as u32)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Deterministic initialisation: Conv2d/Linear weights uniform in
/// (-b, b) with b = 1/sqrt(fan_in); all biases zero.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Weights, NnError> {
    spec.output_shape()?; // reject inconsistent layer chains
    Ok(init_segment(&spec.layers, seed))
}

/// Initialises a bare layer slice (used for segments in tests).
pub fn init_segment(layers: &[LayerSpec], seed: u64) -> Weights {
    let mut w = Weights::zeros_for(layers);
    let mut r = rng::stream(seed, "weight-init", &[]);
    for entry in w.manifest.clone() {
        let len: usize = entry.dims.iter().map(|&d| d as usize).product();
        let is_bias = entry.dims.len() == 1;
        if is_bias {
            continue; // already zero
        }
        let fan_in: usize = entry.dims[1..].iter().map(|&d| d as usize).product();
        let bound = 1.0 / (fan_in as f32).sqrt();
        for v in &mut w.values[entry.offset..entry.offset + len] {
            *v = r.gen_range(-bound..bound);
        }
    }
    w
}

/// One plain SGD step: `w' = w - lr * g`, elementwise.
pub fn sgd_step(w: &Weights, g: &Gradients, learning_rate: f32) -> Result<Weights, NnError> {
    if w.manifest != g.manifest || w.values.len() != g.values.len() {
        return Err(NnError::LayoutMismatch);
    }
    let mut out = w.clone();
    for (v, &gv) in out.values.iter_mut().zip(&g.values) {
        *v -= learning_rate * gv;
    }
    Ok(out)
}

/// In-place variant of [`sgd_step`].
pub fn sgd_step_inplace(w: &mut Weights, g: &Gradients, learning_rate: f32) -> Result<(), NnError> {
    if w.manifest != g.manifest || w.values.len() != g.values.len() {
        return Err(NnError::LayoutMismatch);
    }
    for (v, &gv) in w.values.iter_mut().zip(&g.values) {
        *v -= learning_rate * gv;
    }
    Ok(())
}

/// Unweighted elementwise mean of parameter vectors. Summation runs
/// left-to-right in input order so results are bitwise reproducible.
pub fn fedavg(ws: &[Weights]) -> Result<Weights, NnError> {
    let first = ws.first().ok_or(NnError::EmptyAggregation)?;
    for w in &ws[1..] {
        if !w.same_layout(first) {
            return Err(NnError::LayoutMismatch);
        }
    }
    let mut out = first.clone();
    for w in &ws[1..] {
        for (acc, &v) in out.values.iter_mut().zip(&w.values) {
            *acc += v;
        }
    }
    let inv = 1.0 / ws.len() as f32;
    for v in &mut out.values {
        *v *= inv;
    }
    Ok(out)
}

/// Concatenates client-segment and server-segment weights into weights for
/// the full model described by `spec`.
pub fn compose(spec: &ModelSpec, client: &Weights, server: &Weights) -> Result<Weights, NnError> {
    let expect_client = Weights::zeros_for(spec.client_layers());
    let expect_server = Weights::zeros_for(spec.server_layers());
    if !client.same_layout(&expect_client) || !server.same_layout(&expect_server) {
        return Err(NnError::LayoutMismatch);
    }
    let mut full = Weights::zeros_for(&spec.layers);
    full.values[..client.values.len()].copy_from_slice(&client.values);
    full.values[client.values.len()..].copy_from_slice(&server.values);
    Ok(full)
}

/// Splits full-model weights at the spec's cut into (client, server).
pub fn split(spec: &ModelSpec, full: &Weights) -> Result<(Weights, Weights), NnError> {
    let expect_full = Weights::zeros_for(&spec.layers);
    if !full.same_layout(&expect_full) {
        return Err(NnError::LayoutMismatch);
    }
    let mut client = Weights::zeros_for(spec.client_layers());
    let mut server = Weights::zeros_for(spec.server_layers());
    let nc = client.values.len();
    client.values.copy_from_slice(&full.values[..nc]);
    server.values.copy_from_slice(&full.values[nc..]);
    Ok((client, server))
}
