//! Softmax cross-entropy with log-sum-exp stabilization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy over the batch and its gradient with respect to the
/// logits: `dlogits = (softmax - onehot) / m`.
pub fn loss_softmax_ce(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::shape(format!(
            "logits must be rank 2, got {:?}",
            logits.shape()
        )));
    }
    let (m, c) = (logits.rows(), logits.cols());
    if labels.len() != m {
        return Err(Error::shape(format!(
            "{} labels for a batch of {m}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::param(format!(
            "label {bad} out of range for {c} classes"
        )));
    }

    let mut loss = 0.0;
    let mut dlogits = Tensor::zeros(vec![m, c]);
    let inv_m = 1.0 / m as f64;
    for i in 0..m {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[labels[i]];
        for j in 0..c {
            let softmax = (row[j] - lse).exp();
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            *dlogits.at2_mut(i, j) = (softmax - onehot) * inv_m;
        }
    }
    Ok((loss * inv_m, dlogits))
}
