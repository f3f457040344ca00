//! A small deterministic layer engine: sequential networks with explicit
//! forward tapes, hand-written backward passes, and Adam.
//!
//! Everything runs in `f64` on the CPU. Matrix products go through ndarray's
//! GEMM, which is single-threaded here, so results are bit-reproducible.

mod layer;
mod network;
mod optim;

pub use layer::{sigmoid, Cache, Ctx, Freeze, Layer, LayerSpec};
pub use network::{stack_batch, Grads, Sequential, Tape};
pub use optim::{Adam, AdamConfig};

use ndarray::{Array2, Axis};

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(probs: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
    let mut out = grad.clone();
    for (mut g, p) in out.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
        let dot: f64 = g.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
        g.zip_mut_with(&p, |gi, &pi| *gi = pi * (*gi - dot));
    }
    out
}

/// Argmax per row, lowest index on ties.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
