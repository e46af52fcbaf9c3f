//! Masked multi-task softmax cross-entropy.

use super::tensor::{Real, Tensor3};
use crate::labels::IGNORE;

/// Per-pixel softmax over the class axis of `logits`.
pub fn softmax<T: Real>(logits: &Tensor3<T>) -> Tensor3<T> {
    let n = logits.plane_len();
    let mut out = Tensor3::zeros(logits.c, logits.h, logits.w);
    for p in 0..n {
        let mut max = T::neg_infinity();
        for c in 0..logits.c {
            max = max.max(logits.data[c * n + p]);
        }
        let mut sum = T::zero();
        for c in 0..logits.c {
            let e = (logits.data[c * n + p] - max).exp();
            out.data[c * n + p] = e;
            sum += e;
        }
        for c in 0..logits.c {
            out.data[c * n + p] = out.data[c * n + p] / sum;
        }
    }
    out
}

/// Cross-entropy for one task over a batch.
///
/// `logits[i]` and `labels[i]` belong to example `i`. The loss is averaged
/// over the non-IGNORE pixels of the whole batch; with none it is zero.
/// Returns the loss and the gradient with respect to each example's logits.
pub fn task_cross_entropy<T: Real>(logits: &[&Tensor3<T>], labels: &[&[u8]]) -> (f64, Vec<Tensor3<T>>) {
    assert_eq!(logits.len(), labels.len(), "batch size");
    let n_valid: usize = labels.iter().map(|l| l.iter().filter(|v| **v != IGNORE).count()).sum();
    let mut total = 0.0f64;
    let mut grads = Vec::with_capacity(logits.len());
    for (lg, lab) in logits.iter().zip(labels) {
        let n = lg.plane_len();
        assert_eq!(lab.len(), n, "label plane size");
        let mut g = Tensor3::zeros(lg.c, lg.h, lg.w);
        if n_valid > 0 {
            let sm = softmax(lg);
            let inv = T::of(1.0 / n_valid as f64);
            for (p, &y) in lab.iter().enumerate() {
                if y == IGNORE {
                    continue;
                }
                let y = y as usize;
                assert!(y < lg.c, "label {y} outside {} classes", lg.c);
                total -= log_softmax_at(lg, p, y);
                for c in 0..lg.c {
                    let onehot = if c == y { T::one() } else { T::zero() };
                    g.data[c * n + p] = (sm.data[c * n + p] - onehot) * inv;
                }
            }
        }
        grads.push(g);
    }
    let loss = if n_valid > 0 { total / n_valid as f64 } else { 0.0 };
    (loss, grads)
}

fn log_softmax_at<T: Real>(lg: &Tensor3<T>, p: usize, y: usize) -> f64 {
    let n = lg.plane_len();
    let vals: Vec<f64> = (0..lg.c).map(|c| lg.data[c * n + p].as_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    vals[y] - lse
}

/// Batch loss summed over tasks.
///
/// `logits[i][t]` and `labels[i][t]` are example `i`, task `t`. Returns the
/// total, the per-task losses and gradients shaped like `logits`.
pub fn multi_task_loss<T: Real>(logits: &[Vec<Tensor3<T>>], labels: &[&[Vec<u8>]]) -> (f64, Vec<f64>, Vec<Vec<Tensor3<T>>>) {
    let tasks = logits.first().map_or(0, |l| l.len());
    let mut per_task = Vec::with_capacity(tasks);
    let mut grads: Vec<Vec<Tensor3<T>>> = logits.iter().map(|_| Vec::with_capacity(tasks)).collect();
    for t in 0..tasks {
        let lg: Vec<&Tensor3<T>> = logits.iter().map(|l| &l[t]).collect();
        let lb: Vec<&[u8]> = labels.iter().map(|l| l[t].as_slice()).collect();
        let (loss, g) = task_cross_entropy(&lg, &lb);
        per_task.push(loss);
        for (slot, gi) in grads.iter_mut().zip(g) {
            slot.push(gi);
        }
    }
    (per_task.iter().sum(), per_task, grads)
}
