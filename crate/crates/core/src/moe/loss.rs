//! Task losses on head logits, each returning `(loss, dL/dlogits)`.

use crate::error::{invalid, Result};
use crate::numcore::{logsumexp, softmax_slice, Tensor};

/// `(1 / 2T) · Σ_t ‖z_t − y_t‖²`.
pub fn mse_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() {
        return Err(invalid(format!("mse shapes {:?} vs {:?}", logits.shape(), targets.shape())));
    }
    let t = logits.rows() as f64;
    let diff = logits.sub(targets)?;
    let loss = diff.norm_sq() / (2.0 * t);
    let grad = diff.map(|v| v / t);
    Ok((loss, grad))
}

/// Mean cross-entropy against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (t, v) = logits.dims2()?;
    if labels.len() != t || labels.iter().any(|&l| l >= v) {
        return Err(invalid("labels do not match logits"));
    }
    let mut grad = Tensor::zeros(&[t, v]);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        loss += logsumexp(row) - row[label];
        let g = grad.row_mut(r);
        softmax_slice(row, g);
        g[label] -= 1.0;
        g.iter_mut().for_each(|x| *x /= t as f64);
    }
    Ok((loss / t as f64, grad))
}


/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Regression(Tensor),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn loss(&self, logits: &Tensor) -> Result<(f64, Tensor)> {
        match self {
            Targets::Regression(y) => mse_loss(logits, y),
            Targets::Classes(labels) => cross_entropy(logits, labels),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.rows(),
            Targets::Classes(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
