//! Shared test oracles.
//!
//! The reference network here is an independent f64 implementation written
//! against the layer definitions, not against the production kernels: plain
//! index arithmetic, explicit padding checks, f64 accumulation. Central
//! finite differences of this reference validate the analytic gradients.

#![allow(dead_code)]

use splitsim::nn::{LayerSpec, Tensor, TensorShape, Weights};

/// f64 copy of a weights vector (exact conversion).
pub fn to_f64(values: &[f32]) -> Vec<f64> {
    values.iter().map(|&v| v as f64).collect()
}

/// Reference forward pass of one layer in f64.
/// `params` is the layer's own (weight, bias) pair when it has one.
pub fn ref_layer_forward(
    layer: &LayerSpec,
    input_shape: &TensorShape,
    batch: usize,
    x: &[f64],
    params: Option<(&[f64], &[f64])>,
) -> (Vec<f64>, TensorShape) {
    match layer {
        LayerSpec::Conv2d { in_channels, out_channels } => {
            let (weight, bias) = params.expect("conv params");
            let h = input_shape.dims[1] as isize;
            let w = input_shape.dims[2] as isize;
            let (ic, oc) = (*in_channels, *out_channels);
            let mut out = vec![0.0f64; batch * oc * (h * w) as usize];
            for n in 0..batch {
                for o in 0..oc {
                    for oh in 0..h {
                        for ow in 0..w {
                            let mut acc = bias[o];
                            for i in 0..ic {
                                for kh in 0..3isize {
                                    for kw in 0..3isize {
                                        let ih = oh + kh - 1;
                                        let iw = ow + kw - 1;
                                        if ih < 0 || ih >= h || iw < 0 || iw >= w {
                                            continue;
                                        }
                                        let xi = ((n * ic + i) as isize * h * w + ih * w + iw)
                                            as usize;
                                        let wi = ((o * ic + i) * 9) as isize
                                            + kh * 3
                                            + kw;
                                        acc += weight[wi as usize] * x[xi];
                                    }
                                }
                            }
                            let oi =
                                ((n * oc + o) as isize * h * w + oh * w + ow) as usize;
                            out[oi] = acc;
                        }
                    }
                }
            }
            (out, TensorShape::chw(oc, h as usize, w as usize))
        }
        LayerSpec::Relu => (
            x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            input_shape.clone(),
        ),
        LayerSpec::MaxPool2d => {
            let c = input_shape.dims[0];
            let h = input_shape.dims[1];
            let w = input_shape.dims[2];
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0f64; batch * c * oh * ow];
            for n in 0..batch {
                for ch in 0..c {
                    for r in 0..oh {
                        for q in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            for dr in 0..2 {
                                for dq in 0..2 {
                                    let idx = (n * c + ch) * h * w + (2 * r + dr) * w + 2 * q + dq;
                                    best = best.max(x[idx]);
                                }
                            }
                            out[(n * c + ch) * oh * ow + r * ow + q] = best;
                        }
                    }
                }
            }
            (out, TensorShape::chw(c, oh, ow))
        }
        LayerSpec::Flatten => (x.to_vec(), TensorShape::flat(input_shape.elems())),
        LayerSpec::Linear { in_features, out_features } => {
            let (weight, bias) = params.expect("linear params");
            let mut out = vec![0.0f64; batch * out_features];
            for n in 0..batch {
                for o in 0..*out_features {
                    let mut acc = bias[o];
                    for i in 0..*in_features {
                        acc += weight[o * in_features + i] * x[n * in_features + i];
                    }
                    out[n * out_features + o] = acc;
                }
            }
            (out, TensorShape::flat(*out_features))
        }
    }
}

/// Reference forward through a full layer slice in f64. `values` follows the
/// production manifest order (weight then bias per parameterised layer).
pub fn ref_forward(
    layers: &[LayerSpec],
    input_shape: &TensorShape,
    batch: usize,
    values: &[f64],
    x: &[f64],
) -> Vec<f64> {
    let mut cur = x.to_vec();
    let mut shape = input_shape.clone();
    let mut offset = 0usize;
    for layer in layers {
        let params = match layer {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                let wlen = out_channels * in_channels * 9;
                let p = (&values[offset..offset + wlen], &values[offset + wlen..offset + wlen + out_channels]);
                offset += wlen + out_channels;
                Some(p)
            }
            LayerSpec::Linear { in_features, out_features } => {
                let wlen = in_features * out_features;
                let p = (&values[offset..offset + wlen], &values[offset + wlen..offset + wlen + out_features]);
                offset += wlen + out_features;
                Some(p)
            }
            _ => None,
        };
        let (out, next) = ref_layer_forward(layer, &shape, batch, &cur, params);
        cur = out;
        shape = next;
    }
    cur
}

/// Reference mean softmax cross-entropy in f64.
pub fn ref_softmax_ce(logits: &[f64], labels: &[u8], classes: usize) -> f64 {
    let batch = labels.len();
    let mut total = 0.0f64;
    for n in 0..batch {
        let row = &logits[n * classes..(n + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        total += -(row[labels[n] as usize] - max - sum.ln());
    }
    total / batch as f64
}

/// Max-norm relative error between analytic (f32) and numeric (f64)
/// gradient vectors.
pub fn relative_error(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut max_diff = 0.0f64;
    let mut max_mag = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_diff = max_diff.max((a as f64 - n).abs());
        max_mag = max_mag.max((a as f64).abs().max(n.abs()));
    }
    if max_mag == 0.0 {
        return max_diff;
    }
    max_diff / max_mag
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Builds a batch tensor from raw data.
pub fn tensor(batch: usize, shape: TensorShape, data: Vec<f32>) -> Tensor {
    Tensor::from_data(batch, shape, data).unwrap()
}

/// Weights helper for layer slices in tests.
pub fn weights_for(layers: &[LayerSpec], values: Vec<f32>) -> Weights {
    let mut w = Weights::zeros_for(layers);
    assert_eq!(w.values.len(), values.len());
    w.values = values;
    w
}

// ---------------------------------------------------------------------------
// Split-vs-monolithic oracle
// ---------------------------------------------------------------------------

use splitsim::nn::{backward, forward, loss_ce, sgd_step, ModelSpec};
use splitsim::nn::weights::{compose, init_model, split};
use rand::Rng as _;

pub struct SplitCase {
    pub forward_bitwise: bool,
    pub loss_diff: f32,
    pub roundtrip_weight_diff: f32,
    pub backward_input_diff: f32,
}

/// Runs one batch through the model both ways: cut at the spec's split
/// index with separate weight vectors, and unsplit on the composed vector;
/// then applies one SGD step on both and diffs the resulting weights.
pub fn split_vs_monolithic(spec: &ModelSpec, seed: u64, batch: usize, lr: f32) -> SplitCase {
    let full = init_model(spec, seed).unwrap();
    let (wc, ws) = split(spec, &full).unwrap();

    let mut r = splitsim::rng::stream(seed, "split-case", &[]);
    let n = batch * spec.input_shape.elems();
    let x = tensor(
        batch,
        spec.input_shape.clone(),
        (0..n).map(|_| r.gen_range(0.0..1.0f32)).collect(),
    );
    let labels: Vec<u8> = (0..batch).map(|_| r.gen_range(0..10u8)).collect();

    // split path
    let (act, client_cache) = forward(spec.client_layers(), &wc, &x).unwrap();
    let (logits_split, server_cache) = forward(spec.server_layers(), &ws, &act).unwrap();
    let (loss_split, grad_logits) = loss_ce(&logits_split, &labels).unwrap();
    let server_grads = backward(spec.server_layers(), &ws, &server_cache, &grad_logits).unwrap();
    let client_grads =
        backward(spec.client_layers(), &wc, &client_cache, &server_grads.input_grad).unwrap();
    let ws_next = sgd_step(&ws, &server_grads, lr).unwrap();
    let wc_next = sgd_step(&wc, &client_grads, lr).unwrap();
    let split_next = compose(spec, &wc_next, &ws_next).unwrap();

    // monolithic path
    let (logits_full, full_cache) = forward(&spec.layers, &full, &x).unwrap();
    let (loss_full, grad_full) = loss_ce(&logits_full, &labels).unwrap();
    let full_grads = backward(&spec.layers, &full, &full_cache, &grad_full).unwrap();
    let full_next = sgd_step(&full, &full_grads, lr).unwrap();

    SplitCase {
        forward_bitwise: logits_split.data == logits_full.data,
        loss_diff: (loss_split - loss_full).abs(),
        roundtrip_weight_diff: max_abs_diff(&split_next.values, &full_next.values),
        backward_input_diff: max_abs_diff(&client_grads.input_grad.data, &full_grads.input_grad.data),
    }
}
