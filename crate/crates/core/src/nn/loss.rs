//! Batch losses and their gradients at the network output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::DenseMatrix;

/// Clamp applied to probabilities before taking logarithms.
const PROB_EPS: f64 = 1e-12;

/// Loss applied to the final layer's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Half squared error, `0.5 * sum_j (a_j - y_j)^2` per example.
    Mse,
    /// Cross-entropy against probabilities in `(0, 1)`; targets must be
    /// exactly 0 or 1.
    BinaryCe,
    /// Softmax over the outputs fused with cross-entropy; the network
    /// produces raw logits.
    SoftmaxCe,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LossKind::Mse => "mse",
            LossKind::BinaryCe => "binary_ce",
            LossKind::SoftmaxCe => "softmax_ce",
        };
        f.write_str(name)
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "binary_ce" | "bce" => Ok(LossKind::BinaryCe),
            "softmax_ce" | "softmax" => Ok(LossKind::SoftmaxCe),
            other => Err(Error::InvalidArg(format!("unknown loss {other:?}"))),
        }
    }
}

/// Mean-over-batch loss value and its gradient with respect to `pred`.
pub fn loss(pred: &DenseMatrix, target: &DenseMatrix, kind: LossKind) -> Result<(f64, DenseMatrix)> {
    if pred.n_rows() != target.n_rows() || pred.n_cols() != target.n_cols() {
        return Err(Error::DimMismatch(format!(
            "prediction is {}x{} but target is {}x{}",
            pred.n_rows(),
            pred.n_cols(),
            target.n_rows(),
            target.n_cols()
        )));
    }
    if pred.n_rows() == 0 {
        return Err(Error::InvalidArg("loss over an empty batch".into()));
    }
    match kind {
        LossKind::Mse => Ok(mse(pred, target)),
        LossKind::BinaryCe => binary_ce(pred, target),
        LossKind::SoftmaxCe => softmax_ce(pred, target),
    }
}

fn mse(pred: &DenseMatrix, target: &DenseMatrix) -> (f64, DenseMatrix) {
    let m = pred.n_rows() as f64;
    let mut grad = DenseMatrix::zeros(pred.n_rows(), pred.n_cols());
    let mut total = 0.0;
    for ((g, &a), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let diff = a - y;
        total += 0.5 * diff * diff;
        *g = diff / m;
    }
    (total / m, grad)
}

fn binary_ce(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if let Some(&bad) = target.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidArg(format!(
            "binary cross-entropy target {bad} is not 0 or 1"
        )));
    }
    let m = pred.n_rows() as f64;
    let mut grad = DenseMatrix::zeros(pred.n_rows(), pred.n_cols());
    let mut total = 0.0;
    for ((g, &a), &y) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let a = a.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= y * a.ln() + (1.0 - y) * (1.0 - a).ln();
        *g = (a - y) / (a * (1.0 - a) * m);
    }
    Ok((total / m, grad))
}

fn softmax_ce(pred: &DenseMatrix, target: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    let c = pred.n_cols();
    if c < 2 {
        return Err(Error::InvalidArg(format!(
            "softmax cross-entropy needs at least 2 outputs, got {c}"
        )));
    }
    let m = pred.n_rows() as f64;
    let mut grad = DenseMatrix::zeros(pred.n_rows(), c);
    let mut total = 0.0;
    let mut probs = vec![0.0f64; c];
    for r in 0..pred.n_rows() {
        let logits = pred.row(r);
        let max = logits.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        let mut z = 0.0;
        for (p, &v) in probs.iter_mut().zip(logits) {
            *p = (v - max).exp();
            z += *p;
        }
        let t = target.row(r);
        let g = grad.row_mut(r);
        for j in 0..c {
            let p = probs[j] / z;
            total -= t[j] * p.max(PROB_EPS).ln();
            g[j] = (p - t[j]) / m;
        }
    }
    Ok((total / m, grad))
}
