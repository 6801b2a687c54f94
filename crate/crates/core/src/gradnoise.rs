//! Empirical SGD gradient-noise estimator.
//!
//! The SGD update on a batch `B` decomposes into the full-data gradient
//! plus a zero-mean error term. The expected squared norm of the
//! per-sample deviation,
//!
//! ```text
//! C = E ||grad L_i - grad L_D||^2,
//! ```
//!
//! upper-bounds the power of that error term: for a batch of size `|B|`
//! and step size `alpha`,
//!
//! ```text
//! E ||alpha grad L_B - alpha grad L_D||^2 <= alpha^2 C / |B|.
//! ```
//!
//! This module estimates `C` from per-sample gradients and checks the
//! bound empirically by drawing random batches. For a model, per-sample
//! losses are taken in inference mode (running BatchNorm statistics
//! frozen), which makes them independent across samples so the mean of the
//! per-sample gradients equals the full-data gradient exactly.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::loss_softmax_ce;
use crate::model::SequentialModel;
use crate::rng::SeededRng;

/// Relative slack applied when flagging the bound as holding, absorbing
/// Monte Carlo error in the empirical side (the bound is tight at batch
/// size 1).
pub const BOUND_SLACK: f64 = 0.05;

/// Anything that can produce per-sample loss gradients in a stable
/// flattened parameter order.
pub trait GradSource {
    fn len(&self) -> usize;
    fn sample_gradient(&self, index: usize) -> Result<Vec<f64>>;
}

/// Per-sample gradients of a model's cross-entropy loss, inference mode.
pub struct ModelGradSource<'a> {
    pub model: &'a SequentialModel,
    pub dataset: &'a Dataset,
}

impl GradSource for ModelGradSource<'_> {
    fn len(&self) -> usize {
        self.dataset.len()
    }

    fn sample_gradient(&self, index: usize) -> Result<Vec<f64>> {
        let (x, labels) = self.dataset.gather(&[index]);
        let (logits, caches) = self.model.forward_eval_cached(&x)?;
        let (_, dlogits) = loss_softmax_ce(&logits, &labels)?;
        let grads = self.model.backward(&caches, &dlogits)?;
        Ok(self.model.flatten_grads(&grads))
    }
}

/// One-parameter quadratic fixture: `L_i(w) = (w - x_i)^2`. Its gradient
/// noise has the closed form `C = 4 * Var(x)` at `w = mean(x)`, which makes
/// it a convenient end-to-end oracle.
pub struct ScalarQuadratic {
    pub data: Vec<f64>,
    pub weight: f64,
}

impl ScalarQuadratic {
    /// Closed-form full gradient `2 (w - mean(x))`.
    pub fn full_gradient(&self) -> f64 {
        let mean = self.data.iter().sum::<f64>() / self.data.len() as f64;
        2.0 * (self.weight - mean)
    }
}

impl GradSource for ScalarQuadratic {
    fn len(&self) -> usize {
        self.data.len()
    }

    fn sample_gradient(&self, index: usize) -> Result<Vec<f64>> {
        Ok(vec![2.0 * (self.weight - self.data[index])])
    }
}

/// All per-sample gradients plus their mean (accumulated in index order).
pub struct PerSampleGrads {
    pub grads: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
}

impl PerSampleGrads {
    fn finish(grads: Vec<Vec<f64>>) -> Result<Self> {
        let n = grads.len();
        let dim = grads.first().map_or(0, Vec::len);
        if grads.iter().any(|g| g.len() != dim) {
            return Err(Error::contract("per-sample gradients differ in length"));
        }
        let mut mean = vec![0.0; dim];
        for g in &grads {
            for (m, &v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        let inv = 1.0 / n as f64;
        for m in &mut mean {
            *m *= inv;
        }
        Ok(PerSampleGrads { grads, mean })
    }
}

/// Computes every per-sample gradient sequentially.
pub fn per_sample_gradients(source: &impl GradSource) -> Result<PerSampleGrads> {
    let n = source.len();
    if n == 0 {
        return Err(Error::degenerate("gradient source is empty"));
    }
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        grads.push(source.sample_gradient(i)?);
    }
    PerSampleGrads::finish(grads)
}

/// Rayon-parallel variant; identical output because gradients are gathered
/// by index and reduced in index order.
#[cfg(feature = "parallel")]
pub fn par_per_sample_gradients<S>(source: &S) -> Result<PerSampleGrads>
where
    S: GradSource + Sync,
{
    use rayon::prelude::*;
    let n = source.len();
    if n == 0 {
        return Err(Error::degenerate("gradient source is empty"));
    }
    let grads: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| source.sample_gradient(i))
        .collect::<Result<Vec<_>>>()?;
    PerSampleGrads::finish(grads)
}

/// Gradient of the mean loss over the whole dataset, flattened in stable
/// parameter order. Computed as one batched backward pass; by linearity it
/// equals the mean of the per-sample gradients.
pub fn full_gradient(model: &SequentialModel, dataset: &Dataset) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::degenerate("cannot differentiate over an empty dataset"));
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let (x, labels) = dataset.gather(&indices);
    let (logits, caches) = model.forward_eval_cached(&x)?;
    let (_, dlogits) = loss_softmax_ce(&logits, &labels)?;
    let grads = model.backward(&caches, &dlogits)?;
    Ok(model.flatten_grads(&grads))
}

/// Estimate of the gradient-noise constant `C`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNoiseEstimate {
    /// `mean_i ||grad L_i - grad L_D||^2`.
    pub c_hat: f64,
    /// `|| mean_i (grad L_i - grad L_D) ||`; an algebraic zero, reported as
    /// a sanity value.
    pub error_mean_norm: f64,
    pub samples: usize,
}

/// Estimates `C` from precomputed per-sample gradients.
pub fn estimate_c_from(grads: &PerSampleGrads) -> Result<GradNoiseEstimate> {
    let n = grads.grads.len();
    if n < 2 {
        return Err(Error::param(format!(
            "estimating gradient noise needs at least 2 samples, got {n}"
        )));
    }
    let dim = grads.mean.len();
    let mut c_sum = 0.0;
    let mut mean_dev = vec![0.0; dim];
    for g in &grads.grads {
        let mut sq = 0.0;
        for ((&v, &m), acc) in g.iter().zip(&grads.mean).zip(mean_dev.iter_mut()) {
            let d = v - m;
            sq += d * d;
            *acc += d;
        }
        c_sum += sq;
    }
    let inv = 1.0 / n as f64;
    let error_mean_norm = mean_dev
        .iter()
        .map(|&v| (v * inv) * (v * inv))
        .sum::<f64>()
        .sqrt();
    Ok(GradNoiseEstimate {
        c_hat: c_sum * inv,
        error_mean_norm,
        samples: n,
    })
}

/// Convenience wrapper: per-sample gradients plus [`estimate_c_from`].
pub fn estimate_c(source: &impl GradSource) -> Result<GradNoiseEstimate> {
    estimate_c_from(&per_sample_gradients(source)?)
}

/// Outcome of the empirical bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub alpha: f64,
    pub batch_size: usize,
    pub trials: usize,
    /// Monte Carlo estimate of `E ||alpha grad L_B - alpha grad L_D||^2`
    /// over batches drawn without replacement.
    pub empirical_lhs: f64,
    /// `alpha^2 * c_hat / batch_size`.
    pub bound_rhs: f64,
    /// `empirical_lhs <= bound_rhs * (1 + BOUND_SLACK)`.
    pub holds: bool,
}

/// Draws `trials` batches of size `batch_size` without replacement and
/// compares the mean squared step deviation against `alpha^2 c_hat / B`.
pub fn check_bound(
    grads: &PerSampleGrads,
    alpha: f64,
    batch_size: usize,
    c_hat: f64,
    trials: usize,
    rng: &mut SeededRng,
) -> Result<BoundCheck> {
    let n = grads.grads.len();
    if batch_size < 1 {
        return Err(Error::param("batch size must be >= 1"));
    }
    if batch_size > n {
        return Err(Error::param(format!(
            "batch size {batch_size} exceeds the {n} available samples"
        )));
    }
    if trials < 1 {
        return Err(Error::param("trials must be >= 1"));
    }
    let dim = grads.mean.len();
    let inv_b = 1.0 / batch_size as f64;
    let mut lhs_sum = 0.0;
    let mut batch_grad = vec![0.0; dim];
    for _ in 0..trials {
        let mut indices = rng.sample_without_replacement(n, batch_size);
        indices.sort_unstable();
        batch_grad.iter_mut().for_each(|v| *v = 0.0);
        for &i in &indices {
            for (acc, &v) in batch_grad.iter_mut().zip(&grads.grads[i]) {
                *acc += v;
            }
        }
        let mut sq = 0.0;
        for (&b, &m) in batch_grad.iter().zip(&grads.mean) {
            let d = alpha * (b * inv_b - m);
            sq += d * d;
        }
        lhs_sum += sq;
    }
    let empirical_lhs = lhs_sum / trials as f64;
    let bound_rhs = alpha * alpha * c_hat / batch_size as f64;
    Ok(BoundCheck {
        alpha,
        batch_size,
        trials,
        empirical_lhs,
        bound_rhs,
        holds: empirical_lhs <= bound_rhs * (1.0 + BOUND_SLACK),
    })
}

/// JSON report combining the estimate and the bound check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNoiseReport {
    #[serde(rename = "C_hat")]
    pub c_hat: f64,
    pub error_mean_norm: f64,
    pub alpha: f64,
    pub batch_size: usize,
    pub empirical_lhs: f64,
    pub bound_rhs: f64,
    pub trials: usize,
    pub holds: bool,
}

impl GradNoiseReport {
    pub fn new(estimate: &GradNoiseEstimate, check: &BoundCheck) -> Self {
        GradNoiseReport {
            c_hat: estimate.c_hat,
            error_mean_norm: estimate.error_mean_norm,
            alpha: check.alpha,
            batch_size: check.batch_size,
            empirical_lhs: check.empirical_lhs,
            bound_rhs: check.bound_rhs,
            trials: check.trials,
            holds: check.holds,
        }
    }
}
