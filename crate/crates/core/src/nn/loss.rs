//! Softmax cross-entropy over class logits.

use super::tensor::Tensor;
use super::NnError;

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
///
/// `grad = (softmax - onehot) / batch`, so feeding it straight into
/// backward yields mean-loss gradients.
pub fn loss_ce(logits: &Tensor, labels: &[u8]) -> Result<(f32, Tensor), NnError> {
    let classes = logits.example_elems();
    if labels.len() != logits.batch {
        return Err(NnError::ShapeMismatch {
            expected: format!("{} labels", logits.batch),
            got: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| (y as usize) >= classes) {
        return Err(NnError::LabelOutOfRange { label: bad, classes });
    }
    let mut grad = Tensor::zeros(logits.batch, logits.shape.clone());
    let mut total = 0.0f32;
    let inv_batch = 1.0 / logits.batch as f32;
    for n in 0..logits.batch {
        let row = logits.example(n);
        let grow = grad.example_mut(n);
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for (g, &v) in grow.iter_mut().zip(row) {
            let e = (v - max).exp();
            *g = e;
            sum += e;
        }
        let y = labels[n] as usize;
        total += -(grow[y] / sum).ln();
        let inv_sum = 1.0 / sum;
        for g in grow.iter_mut() {
            *g *= inv_sum * inv_batch;
        }
        grow[y] -= inv_batch;
    }
    Ok((total * inv_batch, grad))
}

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[u8]) -> f32 {
    let mut hits = 0usize;
    for n in 0..logits.batch {
        let row = logits.example(n);
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if best == labels[n] as usize {
            hits += 1;
        }
    }
    hits as f32 / logits.batch.max(1) as f32
}
