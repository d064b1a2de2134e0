//! Forward and backward kernels for the five layer kinds.
//!
//! Everything is f32 with a fixed accumulation order, so repeated runs are
//! bitwise identical and a split model executed segment-by-segment performs
//! exactly the same float operations as the unsplit model.

use super::layers::{LayerSpec, POOL_STRIDE};
use super::tensor::{Tensor, TensorShape};
use super::weights::{Gradients, Weights};
use super::NnError;

/// Per-layer state captured during a forward pass, consumed by backward.
#[derive(Debug, Clone)]
enum CacheEntry {
    Conv { input: Tensor },
    Relu { input: Tensor },
    MaxPool { input_shape: TensorShape, argmax: Vec<u32> },
    Flatten { input_shape: TensorShape },
    Linear { input: Tensor },
}

/// Cache of one forward pass over a layer slice.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    entries: Vec<CacheEntry>,
    kinds: Vec<LayerSpec>,
    batch: usize,
    pub output: Tensor,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    fn matches(&self, layers: &[LayerSpec], grad_out: &Tensor) -> Result<(), NnError> {
        if self.kinds != layers {
            return Err(NnError::StaleCache("cache built for a different layer stack".into()));
        }
        if grad_out.batch != self.batch || grad_out.shape != self.output.shape {
            return Err(NnError::StaleCache(format!(
                "gradient shape {}x{} does not match cached output {}x{}",
                grad_out.batch, grad_out.shape, self.batch, self.output.shape
            )));
        }
        Ok(())
    }
}

/// Runs `x` through the layer slice. Pure in `(w, x)`; the cache holds what
/// backward needs.
pub fn forward(layers: &[LayerSpec], w: &Weights, x: &Tensor) -> Result<(Tensor, ForwardCache), NnError> {
    let expect = Weights::zeros_for(layers);
    if !w.same_layout(&expect) {
        return Err(NnError::LayoutMismatch);
    }
    let mut entries = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    let mut entry_cursor = 0usize;
    for layer in layers {
        let out_shape = layer.output_shape(&cur.shape)?;
        let mut out = Tensor::zeros(cur.batch, out_shape);
        match layer {
            LayerSpec::Conv2d { in_channels, out_channels } => {
                let weight = w.tensor(entry_cursor);
                let bias = w.tensor(entry_cursor + 1);
                entry_cursor += 2;
                conv2d_forward(&cur, &mut out, weight, bias, *in_channels, *out_channels);
                entries.push(CacheEntry::Conv { input: cur });
            }
            LayerSpec::Relu => {
                for (o, &v) in out.data.iter_mut().zip(&cur.data) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
                entries.push(CacheEntry::Relu { input: cur });
            }
            LayerSpec::MaxPool2d => {
                let argmax = maxpool_forward(&cur, &mut out);
                entries.push(CacheEntry::MaxPool { input_shape: cur.shape.clone(), argmax });
            }
            LayerSpec::Flatten => {
                out.data.copy_from_slice(&cur.data);
                entries.push(CacheEntry::Flatten { input_shape: cur.shape.clone() });
            }
            LayerSpec::Linear { in_features, out_features } => {
                let weight = w.tensor(entry_cursor);
                let bias = w.tensor(entry_cursor + 1);
                entry_cursor += 2;
                linear_forward(&cur, &mut out, weight, bias, *in_features, *out_features);
                entries.push(CacheEntry::Linear { input: cur });
            }
        }
        cur = out;
    }
    let cache = ForwardCache {
        entries,
        kinds: layers.to_vec(),
        batch: x.batch,
        output: cur.clone(),
    };
    Ok((cur, cache))
}

/// Backpropagates `grad_out` through the cached pass, producing parameter
/// gradients (weight layout) and the gradient at the segment input.
pub fn backward(
    layers: &[LayerSpec],
    w: &Weights,
    cache: &ForwardCache,
    grad_out: &Tensor,
) -> Result<Gradients, NnError> {
    let expect = Weights::zeros_for(layers);
    if !w.same_layout(&expect) {
        return Err(NnError::LayoutMismatch);
    }
    cache.matches(layers, grad_out)?;

    let mut grads = vec![0.0f32; w.values.len()];
    let mut dy = grad_out.clone();
    // manifest entry cursor positioned past the last parameterised layer
    let mut entry_cursor = w.manifest.len();
    for (layer, entry) in layers.iter().zip(&cache.entries).rev() {
        match (layer, entry) {
            (LayerSpec::Conv2d { in_channels, out_channels }, CacheEntry::Conv { input }) => {
                entry_cursor -= 2;
                let we = &w.manifest[entry_cursor];
                let be = &w.manifest[entry_cursor + 1];
                let wlen: usize = we.dims.iter().map(|&d| d as usize).product();
                let blen: usize = be.dims.iter().map(|&d| d as usize).product();
                let mut dx = Tensor::zeros(input.batch, input.shape.clone());
                {
                    let (head, tail) = grads.split_at_mut(be.offset);
                    let dweight = &mut head[we.offset..we.offset + wlen];
                    let dbias = &mut tail[..blen];
                    conv2d_backward(
                        input,
                        &dy,
                        w.tensor(entry_cursor),
                        &mut dx,
                        dweight,
                        dbias,
                        *in_channels,
                        *out_channels,
                    );
                }
                dy = dx;
            }
            (LayerSpec::Relu, CacheEntry::Relu { input }) => {
                let mut dx = Tensor::zeros(input.batch, input.shape.clone());
                for ((d, &g), &v) in dx.data.iter_mut().zip(&dy.data).zip(&input.data) {
                    *d = if v > 0.0 { g } else { 0.0 };
                }
                dy = dx;
            }
            (LayerSpec::MaxPool2d, CacheEntry::MaxPool { input_shape, argmax }) => {
                let mut dx = Tensor::zeros(dy.batch, input_shape.clone());
                for (&idx, &g) in argmax.iter().zip(&dy.data) {
                    dx.data[idx as usize] += g;
                }
                dy = dx;
            }
            (LayerSpec::Flatten, CacheEntry::Flatten { input_shape }) => {
                dy = Tensor::from_data(dy.batch, input_shape.clone(), dy.data)?;
            }
            (LayerSpec::Linear { in_features, out_features }, CacheEntry::Linear { input }) => {
                entry_cursor -= 2;
                let we = &w.manifest[entry_cursor];
                let be = &w.manifest[entry_cursor + 1];
                let wlen: usize = we.dims.iter().map(|&d| d as usize).product();
                let blen: usize = be.dims.iter().map(|&d| d as usize).product();
                let mut dx = Tensor::zeros(input.batch, input.shape.clone());
                {
                    let (head, tail) = grads.split_at_mut(be.offset);
                    let dweight = &mut head[we.offset..we.offset + wlen];
                    let dbias = &mut tail[..blen];
                    linear_backward(
                        input,
                        &dy,
                        w.tensor(entry_cursor),
                        &mut dx,
                        dweight,
                        dbias,
                        *in_features,
                        *out_features,
                    );
                }
                dy = dx;
            }
            _ => return Err(NnError::StaleCache("cache entry kind mismatch".into())),
        }
    }
    Ok(Gradients { values: grads, manifest: w.manifest.clone(), input_grad: dy })
}

/// Copies a HxW plane into a zero-bordered (H+2)x(W+2) buffer.
fn pad_plane(src: &[f32], dst: &mut [f32], h: usize, wd: usize) {
    let w2 = wd + 2;
    dst[..w2].fill(0.0);
    dst[(h + 1) * w2..].fill(0.0);
    for row in 0..h {
        let d = &mut dst[(row + 1) * w2..(row + 2) * w2];
        d[0] = 0.0;
        d[wd + 1] = 0.0;
        d[1..=wd].copy_from_slice(&src[row * wd..(row + 1) * wd]);
    }
}

/// Copies the interior of a padded plane back to HxW layout.
fn unpad_plane(src: &[f32], dst: &mut [f32], h: usize, wd: usize) {
    let w2 = wd + 2;
    for row in 0..h {
        dst[row * wd..(row + 1) * wd]
            .copy_from_slice(&src[(row + 1) * w2 + 1..(row + 1) * w2 + 1 + wd]);
    }
}

/// `dst[j] += k * src[j + shift]` over the overlap of both planes.
///
/// Convolution taps become plane-wide shifted accumulations over padded
/// buffers: the zero borders cancel every out-of-row pairing, and whatever
/// lands in the destination border is trimmed by [`unpad_plane`].
#[inline]
fn shifted_axpy(dst: &mut [f32], src: &[f32], shift: isize, k: f32) {
    let len = dst.len();
    let (d0, s0) = if shift >= 0 { (0usize, shift as usize) } else { ((-shift) as usize, 0) };
    let n = len - d0 - s0;
    for (d, &s) in dst[d0..d0 + n].iter_mut().zip(&src[s0..s0 + n]) {
        *d += k * s;
    }
}

/// Dot product over the overlap of two planes at a relative shift, with
/// eight partial accumulators folded in a fixed order.
#[inline]
fn shifted_dot(a: &[f32], b: &[f32], shift: isize) -> f32 {
    let len = a.len();
    let (a0, b0) = if shift >= 0 { (0usize, shift as usize) } else { ((-shift) as usize, 0) };
    let n = len - a0 - b0;
    dot(&a[a0..a0 + n], &b[b0..b0 + n])
}

/// Fixed-order chunked dot product; the eight lanes vectorise and the final
/// fold order never varies.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..8 {
            lanes[l] += xa[l] * xb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7])))
        + tail
}

/// Tap shift within a padded plane for kernel offset (kh, kw).
#[inline]
fn tap_shift(kh: usize, kw: usize, w2: usize) -> isize {
    (kh as isize - 1) * w2 as isize + (kw as isize - 1)
}

/// Pads every example's channel plane into one contiguous strip per
/// channel: `dst[c]` holds `batch` padded planes back to back. Plane seams
/// are separated by two zero border rows, so plane-wide shifted passes
/// (|shift| <= W+3 < plane size) never leak values between examples.
fn pad_strips(x: &Tensor, channels: usize, h: usize, wd: usize) -> Vec<Vec<f32>> {
    let plane = h * wd;
    let pp = (h + 2) * (wd + 2);
    let mut strips = vec![vec![0.0f32; x.batch * pp]; channels];
    for (c, strip) in strips.iter_mut().enumerate() {
        for n in 0..x.batch {
            let src = &x.data[(n * channels + c) * plane..][..plane];
            pad_plane(src, &mut strip[n * pp..(n + 1) * pp], h, wd);
        }
    }
    strips
}

fn conv2d_forward(x: &Tensor, out: &mut Tensor, weight: &[f32], bias: &[f32], in_c: usize, out_c: usize) {
    let h = x.shape.dims[1];
    let wd = x.shape.dims[2];
    let plane = h * wd;
    let w2 = wd + 2;
    let pp = (h + 2) * w2;
    let x_pad = pad_strips(x, in_c, h, wd);
    let mut out_pad = vec![0.0f32; x.batch * pp];
    for oc in 0..out_c {
        out_pad.fill(bias[oc]);
        for (ic, strip) in x_pad.iter().enumerate() {
            let w_base = (oc * in_c + ic) * 9;
            for kh in 0..3 {
                for kw in 0..3 {
                    shifted_axpy(&mut out_pad, strip, tap_shift(kh, kw, w2), weight[w_base + kh * 3 + kw]);
                }
            }
        }
        for n in 0..x.batch {
            unpad_plane(
                &out_pad[n * pp..(n + 1) * pp],
                &mut out.data[(n * out_c + oc) * plane..][..plane],
                h,
                wd,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &Tensor,
    dy: &Tensor,
    weight: &[f32],
    dx: &mut Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    in_c: usize,
    out_c: usize,
) {
    let h = x.shape.dims[1];
    let wd = x.shape.dims[2];
    let plane = h * wd;
    let w2 = wd + 2;
    let pp = (h + 2) * w2;
    let x_pad = pad_strips(x, in_c, h, wd);
    let dy_pad = pad_strips(dy, out_c, h, wd);
    for oc in 0..out_c {
        let mut bias_acc = 0.0f32;
        for n in 0..dy.batch {
            for g in &dy.data[(n * out_c + oc) * plane..][..plane] {
                bias_acc += *g;
            }
        }
        dbias[oc] += bias_acc;
    }
    if in_c * 9 >= 64 {
        // Wide kernels: position-major accumulation over patch rows keeps
        // the inner loop a long contiguous multiply-add.
        conv2d_weight_grad_patch(x, dy, &x_pad, dweight, in_c, out_c, h, wd);
    } else {
        for oc in 0..out_c {
            let dyp = &dy_pad[oc];
            for (ic, xp) in x_pad.iter().enumerate() {
                let w_base = (oc * in_c + ic) * 9;
                for kh in 0..3 {
                    for kw in 0..3 {
                        dweight[w_base + kh * 3 + kw] += shifted_dot(dyp, xp, tap_shift(kh, kw, w2));
                    }
                }
            }
        }
    }
    let mut dx_pad = vec![0.0f32; x.batch * pp];
    for ic in 0..in_c {
        dx_pad.fill(0.0);
        for (oc, dyp) in dy_pad.iter().enumerate() {
            let w_base = (oc * in_c + ic) * 9;
            for kh in 0..3 {
                for kw in 0..3 {
                    // transposed pass: dx picks up dy through the opposite
                    // shift of the forward tap
                    shifted_axpy(&mut dx_pad, dyp, -tap_shift(kh, kw, w2), weight[w_base + kh * 3 + kw]);
                }
            }
        }
        for n in 0..x.batch {
            unpad_plane(
                &dx_pad[n * pp..(n + 1) * pp],
                &mut dx.data[(n * in_c + ic) * plane..][..plane],
                h,
                wd,
            );
        }
    }
}

fn maxpool_forward(x: &Tensor, out: &mut Tensor) -> Vec<u32> {
    let c = x.shape.dims[0];
    let h = x.shape.dims[1];
    let wd = x.shape.dims[2];
    let oh = h / POOL_STRIDE;
    let ow = wd / POOL_STRIDE;
    let in_plane = h * wd;
    let out_plane = oh * ow;
    let mut argmax = vec![0u32; x.batch * c * out_plane];
    let out_data = &mut out.data;
    for n in 0..x.batch {
        for ch in 0..c {
            let base_in = (n * c + ch) * in_plane;
            let base_out = (n * c + ch) * out_plane;
            for r in 0..oh {
                for q in 0..ow {
                    let i0 = base_in + (2 * r) * wd + 2 * q;
                    // fixed scan order; first maximum wins ties
                    let cands = [i0, i0 + 1, i0 + wd, i0 + wd + 1];
                    let mut best = cands[0];
                    let mut best_v = x.data[best];
                    for &cand in &cands[1..] {
                        let v = x.data[cand];
                        if v > best_v {
                            best_v = v;
                            best = cand;
                        }
                    }
                    out_data[base_out + r * ow + q] = best_v;
                    argmax[base_out + r * ow + q] = best as u32;
                }
            }
        }
    }
    argmax
}

/// Weight gradient via patch rows: for every output position p the row
/// `patch[p] = x taps around p` (length in_c*9) is accumulated into each
/// output channel's gradient row, scaled by that channel's upstream value
/// at p. Position-major order is fixed, so results are deterministic.
#[allow(clippy::too_many_arguments)]
fn conv2d_weight_grad_patch(
    x: &Tensor,
    dy: &Tensor,
    x_pad: &[Vec<f32>],
    dweight: &mut [f32],
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
) {
    let k = in_c * 9;
    let w2 = wd + 2;
    let pp = (h + 2) * w2;
    let plane = h * wd;
    let mut patch = vec![0.0f32; k];
    let mut upstream = vec![0.0f32; out_c];
    for n in 0..x.batch {
        for oh in 0..h {
            for ow in 0..wd {
                for ic in 0..in_c {
                    let strip = &x_pad[ic][n * pp..(n + 1) * pp];
                    let dst = &mut patch[ic * 9..ic * 9 + 9];
                    for kh in 0..3 {
                        let row = &strip[(oh + kh) * w2 + ow..(oh + kh) * w2 + ow + 3];
                        dst[kh * 3..kh * 3 + 3].copy_from_slice(row);
                    }
                }
                for oc in 0..out_c {
                    upstream[oc] = dy.data[(n * out_c + oc) * plane + oh * wd + ow];
                }
                for oc in 0..out_c {
                    let g = upstream[oc];
                    if g == 0.0 {
                        continue;
                    }
                    for (dw, &pv) in dweight[oc * k..(oc + 1) * k].iter_mut().zip(&patch) {
                        *dw += g * pv;
                    }
                }
            }
        }
    }
}

fn linear_forward(x: &Tensor, out: &mut Tensor, weight: &[f32], bias: &[f32], in_f: usize, out_f: usize) {
    for n in 0..x.batch {
        let x_n = &x.data[n * in_f..][..in_f];
        let o_n = &mut out.data[n * out_f..][..out_f];
        for o in 0..out_f {
            o_n[o] = bias[o] + dot(&weight[o * in_f..][..in_f], x_n);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn linear_backward(
    x: &Tensor,
    dy: &Tensor,
    weight: &[f32],
    dx: &mut Tensor,
    dweight: &mut [f32],
    dbias: &mut [f32],
    in_f: usize,
    out_f: usize,
) {
    for n in 0..x.batch {
        let x_n = &x.data[n * in_f..][..in_f];
        let dy_n = &dy.data[n * out_f..][..out_f];
        let dx_n = &mut dx.data[n * in_f..][..in_f];
        for o in 0..out_f {
            let g = dy_n[o];
            dbias[o] += g;
            let wrow = &weight[o * in_f..][..in_f];
            let dwrow = &mut dweight[o * in_f..][..in_f];
            for ((dw, &xv), (d, &wv)) in dwrow.iter_mut().zip(x_n).zip(dx_n.iter_mut().zip(wrow)) {
                *dw += g * xv;
                *d += g * wv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::weights::init_segment;

    #[test]
    fn relu_definition() {
        let layers = [LayerSpec::Relu];
        let w = Weights::zeros_for(&layers);
        let x = Tensor::from_data(1, TensorShape::flat(3), vec![-1.0, 0.0, 2.0]).unwrap();
        let (y, _) = forward(&layers, &w, &x).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_definition() {
        let layers = [LayerSpec::MaxPool2d];
        let w = Weights::zeros_for(&layers);
        let x = Tensor::from_data(1, TensorShape::chw(1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = forward(&layers, &w, &x).unwrap();
        assert_eq!(y.shape, TensorShape::chw(1, 1, 1));
        assert_eq!(y.data, vec![4.0]);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let layers = [LayerSpec::MaxPool2d];
        let w = Weights::zeros_for(&layers);
        let data: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let x = Tensor::from_data(1, TensorShape::chw(1, 3, 3), data).unwrap();
        let (y, _) = forward(&layers, &w, &x).unwrap();
        // window over rows 0-1, cols 0-1 -> max of {0,1,3,4}
        assert_eq!(y.data, vec![4.0]);
    }

    #[test]
    fn zero_grad_out_gives_zero_gradients() {
        let layers = [
            LayerSpec::Conv2d { in_channels: 2, out_channels: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d,
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 3 * 2 * 2, out_features: 4 },
        ];
        let w = init_segment(&layers, 11);
        let x = Tensor::from_data(
            2,
            TensorShape::chw(2, 4, 4),
            (0..64).map(|v| (v as f32) * 0.1 - 3.0).collect(),
        )
        .unwrap();
        let (y, cache) = forward(&layers, &w, &x).unwrap();
        let zero = Tensor::zeros(y.batch, y.shape.clone());
        let g = backward(&layers, &w, &cache, &zero).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
        assert!(g.input_grad.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_rejected() {
        let layers_a = [LayerSpec::Relu];
        let layers_b = [LayerSpec::Flatten];
        let w = Weights::zeros_for(&layers_a);
        let x = Tensor::from_data(1, TensorShape::flat(2), vec![1.0, -1.0]).unwrap();
        let (y, cache) = forward(&layers_a, &w, &x).unwrap();
        let err = backward(&layers_b, &Weights::zeros_for(&layers_b), &cache, &y);
        assert!(matches!(err, Err(NnError::StaleCache(_))));
        // mismatched gradient shape
        let bad = Tensor::zeros(2, TensorShape::flat(2));
        assert!(matches!(backward(&layers_a, &w, &cache, &bad), Err(NnError::StaleCache(_))));
    }

    #[test]
    fn forward_is_pure() {
        let layers = [LayerSpec::Conv2d { in_channels: 1, out_channels: 2 }];
        let w = init_segment(&layers, 3);
        let x = Tensor::from_data(1, TensorShape::chw(1, 3, 3), (0..9).map(|v| v as f32).collect())
            .unwrap();
        let (a, _) = forward(&layers, &w, &x).unwrap();
        let (b, _) = forward(&layers, &w, &x).unwrap();
        assert_eq!(a.data, b.data);
    }
}
