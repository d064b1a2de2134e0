//! Central finite-difference checks of every layer kind against the f64
//! reference network, plus the loss gradient check.
//!
//! Inputs for kinked layers (ReLU, MaxPool2d) are sampled away from their
//! kink points so the numeric derivative is well defined at step 1e-3.

mod common;

use common::*;
use rand::Rng;
use splitsim::nn::{backward, forward, loss_ce, LayerSpec, Tensor, TensorShape};
use splitsim::rng;

const STEP: f64 = 1e-3;
const TOLERANCE: f64 = 1e-4;

/// Scalarises an output vector with a fixed projection so every layer test
/// reduces to a scalar loss: L = sum_i p_i * y_i.
fn projection(len: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, "gradcheck-projection", &[]);
    (0..len).map(|_| r.gen_range(0.25..1.75) * if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn ref_projected(
    layers: &[LayerSpec],
    input_shape: &TensorShape,
    batch: usize,
    values: &[f64],
    x: &[f64],
    proj: &[f64],
) -> f64 {
    let y = ref_forward(layers, input_shape, batch, values, x);
    y.iter().zip(proj).map(|(a, b)| a * b).sum()
}

struct CheckOutcome {
    param_error: f64,
    input_error: f64,
}

/// Runs one finite-difference instance for a single-layer stack.
fn check_layer(layers: &[LayerSpec], input_shape: TensorShape, batch: usize, x: Vec<f32>, seed: u64) -> CheckOutcome {
    let w = splitsim::nn::weights::init_segment(layers, seed);
    let xt = tensor(batch, input_shape.clone(), x);
    let (y, cache) = forward(layers, &w, &xt).unwrap();
    let proj = projection(y.data.len(), seed ^ 0xabcd);
    let grad_out = tensor(
        y.batch,
        y.shape.clone(),
        proj.iter().map(|&p| p as f32).collect(),
    );
    let grads = backward(layers, &w, &cache, &grad_out).unwrap();

    let wf: Vec<f64> = to_f64(&w.values);
    let xf: Vec<f64> = to_f64(&xt.data);

    // numeric parameter gradient
    let mut num_params = vec![0.0f64; wf.len()];
    for i in 0..wf.len() {
        let mut plus = wf.clone();
        plus[i] += STEP;
        let mut minus = wf.clone();
        minus[i] -= STEP;
        let lp = ref_projected(layers, &input_shape, batch, &plus, &xf, &proj);
        let lm = ref_projected(layers, &input_shape, batch, &minus, &xf, &proj);
        num_params[i] = (lp - lm) / (2.0 * STEP);
    }
    // numeric input gradient
    let mut num_input = vec![0.0f64; xf.len()];
    for i in 0..xf.len() {
        let mut plus = xf.clone();
        plus[i] += STEP;
        let mut minus = xf.clone();
        minus[i] -= STEP;
        let lp = ref_projected(layers, &input_shape, batch, &wf, &plus, &proj);
        let lm = ref_projected(layers, &input_shape, batch, &wf, &minus, &proj);
        num_input[i] = (lp - lm) / (2.0 * STEP);
    }

    let param_error = if wf.is_empty() { 0.0 } else { relative_error(&grads.values, &num_params) };
    let input_error = relative_error(&grads.input_grad.data, &num_input);
    CheckOutcome { param_error, input_error }
}

/// Smooth input: any values are fine for linear layers and convolutions.
fn smooth_input(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, "gradcheck-input", &[]);
    (0..n).map(|_| r.gen_range(-1.5..1.5)).collect()
}

/// Input bounded away from zero for ReLU (margin 0.05 >> step 1e-3).
fn relu_safe_input(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, "gradcheck-relu", &[]);
    (0..n)
        .map(|_| {
            let mag = 0.05 + r.gen_range(0.0..1.5f32);
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Input whose 2x2 pooling windows have pairwise gaps >= 0.05 so the argmax
/// cannot switch under a 1e-3 perturbation. Resampling is seeded and bounded.
fn pool_safe_input(shape: &TensorShape, batch: usize, seed: u64) -> Vec<f32> {
    let (c, h, w) = (shape.dims[0], shape.dims[1], shape.dims[2]);
    let mut r = rng::stream(seed, "gradcheck-pool", &[]);
    let mut data = vec![0.0f32; batch * c * h * w];
    for n in 0..batch {
        for ch in 0..c {
            for wr in 0..h / 2 {
                for wq in 0..w / 2 {
                    'window: for attempt in 0..1000 {
                        let vals: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0f32)).collect();
                        for i in 0..4 {
                            for j in i + 1..4 {
                                if (vals[i] - vals[j]).abs() < 0.05 {
                                    continue 'window;
                                }
                            }
                        }
                        assert!(attempt < 999);
                        for dr in 0..2 {
                            for dq in 0..2 {
                                let idx =
                                    (n * c + ch) * h * w + (2 * wr + dr) * w + 2 * wq + dq;
                                data[idx] = vals[dr * 2 + dq];
                            }
                        }
                        break;
                    }
                }
            }
        }
    }
    data
}

const INSTANCES: usize = 20;

#[test]
fn conv2d_matches_finite_differences() {
    for i in 0..INSTANCES as u64 {
        let shape = TensorShape::chw(3, 8, 8);
        let x = smooth_input(2 * shape.elems(), 100 + i);
        let layers = [LayerSpec::Conv2d { in_channels: 3, out_channels: 4 }];
        let out = check_layer(&layers, shape, 2, x, 200 + i);
        assert!(out.param_error < TOLERANCE, "param err {} at instance {}", out.param_error, i);
        assert!(out.input_error < TOLERANCE, "input err {} at instance {}", out.input_error, i);
    }
}

#[test]
fn linear_matches_finite_differences() {
    for i in 0..INSTANCES as u64 {
        let shape = TensorShape::flat(24);
        let x = smooth_input(3 * 24, 300 + i);
        let layers = [LayerSpec::Linear { in_features: 24, out_features: 7 }];
        let out = check_layer(&layers, shape, 3, x, 400 + i);
        assert!(out.param_error < TOLERANCE, "param err {} at instance {}", out.param_error, i);
        assert!(out.input_error < TOLERANCE, "input err {} at instance {}", out.input_error, i);
    }
}

#[test]
fn relu_matches_finite_differences() {
    for i in 0..INSTANCES as u64 {
        let shape = TensorShape::chw(3, 8, 8);
        let x = relu_safe_input(2 * shape.elems(), 500 + i);
        let layers = [LayerSpec::Relu];
        let out = check_layer(&layers, shape, 2, x, 600 + i);
        assert!(out.input_error < TOLERANCE, "input err {} at instance {}", out.input_error, i);
    }
}

#[test]
fn maxpool_matches_finite_differences() {
    for i in 0..INSTANCES as u64 {
        let shape = TensorShape::chw(3, 8, 8);
        let x = pool_safe_input(&shape, 2, 700 + i);
        let layers = [LayerSpec::MaxPool2d];
        let out = check_layer(&layers, shape, 2, x, 800 + i);
        assert!(out.input_error < TOLERANCE, "input err {} at instance {}", out.input_error, i);
    }
}

#[test]
fn flatten_matches_finite_differences() {
    for i in 0..INSTANCES as u64 {
        let shape = TensorShape::chw(2, 4, 4);
        let x = smooth_input(2 * shape.elems(), 900 + i);
        let layers = [LayerSpec::Flatten];
        let out = check_layer(&layers, shape, 2, x, 1000 + i);
        assert!(out.input_error < TOLERANCE, "input err {} at instance {}", out.input_error, i);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for i in 0..5u64 {
        let mut r = rng::stream(42 + i, "gradcheck-loss", &[]);
        let batch = 4usize;
        let logits: Vec<f32> = (0..batch * 10).map(|_| r.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..batch).map(|_| r.gen_range(0..10u8)).collect();
        let lt = tensor(batch, TensorShape::flat(10), logits.clone());
        let (_, grad) = loss_ce(&lt, &labels).unwrap();

        let lf: Vec<f64> = to_f64(&logits);
        let mut numeric = vec![0.0f64; lf.len()];
        for j in 0..lf.len() {
            let mut plus = lf.clone();
            plus[j] += STEP;
            let mut minus = lf.clone();
            minus[j] -= STEP;
            numeric[j] = (ref_softmax_ce(&plus, &labels, 10) - ref_softmax_ce(&minus, &labels, 10))
                / (2.0 * STEP);
        }
        let err = relative_error(&grad.data, &numeric);
        assert!(err < TOLERANCE, "loss grad err {} at instance {}", err, i);
    }
}
