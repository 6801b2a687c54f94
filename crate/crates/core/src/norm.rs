//! BatchNorm with interchangeable variance statistics.
//!
//! All three variants share the batch mean; they differ only in the scale
//! statistic `sigma` used to normalize:
//!
//! - **L2**: root of the average squared deviation (plus `eps` under the
//!   root) — the classic BatchNorm.
//! - **L1**: average absolute deviation, `eps` added linearly.
//! - **TopK**: average of the `k` largest absolute deviations per feature,
//!   `eps` added linearly. Ties select the lowest row index.
//!
//! The forward map is `y = gamma * (x - mean) / sigma + beta`, computed per
//! feature over the batch axis. [`bn_backward`] gives exact gradients with
//! `mean` and `sigma` treated as functions of the input; L1 uses the sign
//! subgradient with `sign(0) = 0`, TopK differentiates through the cached
//! selection only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{mean_axis0, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOPK: usize = 10;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Scale factor that makes the mean absolute deviation of a Gaussian
/// estimate its standard deviation.
pub const GAUSS_L1_SCALE: f64 = 1.253_314_137_315_500_3; // sqrt(pi/2)

/// Choice of variance statistic, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum NormKind {
    L2 {
        #[serde(default = "default_eps")]
        eps: f64,
    },
    L1 {
        #[serde(default = "default_eps")]
        eps: f64,
        /// Multiply the mean absolute deviation by sqrt(pi/2) so sigma
        /// estimates a Gaussian standard deviation. Off by default.
        #[serde(default)]
        gauss_correction: bool,
    },
    TopK {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_k")]
        k: usize,
    },
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_k() -> usize {
    DEFAULT_TOPK
}

impl NormKind {
    pub fn l2() -> Self {
        NormKind::L2 { eps: DEFAULT_EPS }
    }

    pub fn l1() -> Self {
        NormKind::L1 {
            eps: DEFAULT_EPS,
            gauss_correction: false,
        }
    }

    pub fn topk(k: usize) -> Self {
        NormKind::TopK {
            eps: DEFAULT_EPS,
            k,
        }
    }

    pub fn eps(&self) -> f64 {
        match *self {
            NormKind::L2 { eps } | NormKind::L1 { eps, .. } | NormKind::TopK { eps, .. } => eps,
        }
    }

    /// Short label used in file names and comparison tables.
    pub fn label(&self) -> String {
        match *self {
            NormKind::L2 { .. } => "l2".to_string(),
            NormKind::L1 { .. } => "l1".to_string(),
            NormKind::TopK { k, .. } => format!("topk{k}"),
        }
    }

    /// Strict validation used at configuration boundaries: `eps` must be
    /// strictly positive there so constant batches stay finite. Library
    /// code accepts `eps = 0` for exact-arithmetic use.
    pub fn validate(&self) -> Result<()> {
        if !(self.eps() > 0.0) {
            return Err(Error::param(format!(
                "norm eps must be > 0 in configuration, got {}",
                self.eps()
            )));
        }
        if let NormKind::TopK { k, .. } = *self {
            if k < 1 {
                return Err(Error::param("topk k must be >= 1"));
            }
        }
        Ok(())
    }
}

/// L2 scale per feature: `sqrt(mean((x - mu)^2) + eps)`.
pub fn sigma_l2(x: &Tensor, mu: &Tensor, eps: f64) -> Result<Tensor> {
    check_stat_shapes(x, mu)?;
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for i in 0..m {
        for (o, (&v, &mean)) in out.iter_mut().zip(x.row(i).iter().zip(mu.data())) {
            let dev = v - mean;
            *o += dev * dev;
        }
    }
    let inv_m = 1.0 / m as f64;
    for o in &mut out {
        *o = (*o * inv_m + eps).sqrt();
    }
    Tensor::from_vec(vec![d], out)
}

/// L1 scale per feature: `mean(|x - mu|) + eps`.
pub fn sigma_l1(x: &Tensor, mu: &Tensor, eps: f64) -> Result<Tensor> {
    check_stat_shapes(x, mu)?;
    let (m, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for i in 0..m {
        for (o, (&v, &mean)) in out.iter_mut().zip(x.row(i).iter().zip(mu.data())) {
            *o += (v - mean).abs();
        }
    }
    // divide (not multiply by a reciprocal) so sigma_topk with k >= m
    // reproduces these values bit for bit
    for o in &mut out {
        *o = *o / m as f64 + eps;
    }
    Tensor::from_vec(vec![d], out)
}

/// Per-feature row indices selected by TopK, ascending within each feature.
pub type TopkMask = Vec<Vec<usize>>;

/// TopK scale per feature: mean of the `min(k, m)` largest absolute
/// deviations plus `eps`. Ties are broken toward the lowest row index. The
/// returned mask records the selected rows per feature.
pub fn sigma_topk(x: &Tensor, mu: &Tensor, k: usize, eps: f64) -> Result<(Tensor, TopkMask)> {
    check_stat_shapes(x, mu)?;
    if k < 1 {
        return Err(Error::param("topk k must be >= 1"));
    }
    let (m, d) = (x.rows(), x.cols());
    let k_eff = k.min(m);
    let mut out = vec![0.0; d];
    let mut mask: TopkMask = Vec::with_capacity(d);
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for j in 0..d {
        let mean = mu.data()[j];
        order.clear();
        order.extend(0..m);
        // Stable sort by descending |deviation| keeps ties in ascending
        // row order.
        order.sort_by(|&a, &b| {
            let da = (x.at2(a, j) - mean).abs();
            let db = (x.at2(b, j) - mean).abs();
            db.partial_cmp(&da).expect("finite deviations")
        });
        let mut selected: Vec<usize> = order[..k_eff].to_vec();
        selected.sort_unstable();
        // Summing in ascending row order makes k >= m agree with sigma_l1
        // bit for bit.
        let sum: f64 = selected.iter().map(|&i| (x.at2(i, j) - mean).abs()).sum();
        out[j] = sum / k_eff as f64 + eps;
        mask.push(selected);
    }
    Ok((Tensor::from_vec(vec![d], out)?, mask))
}

fn check_stat_shapes(x: &Tensor, mu: &Tensor) -> Result<()> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "batch statistics require a rank-2 input, got {:?}",
            x.shape()
        )));
    }
    if mu.rank() != 1 || mu.len() != x.cols() {
        return Err(Error::shape(format!(
            "mean shape {:?} does not match {} features",
            mu.shape(),
            x.cols()
        )));
    }
    if x.rows() == 0 {
        return Err(Error::degenerate("empty batch"));
    }
    Ok(())
}

/// BatchNorm layer state: trainable scale/shift plus running statistics.
///
/// `running_sigma` tracks the scale statistic directly (not a variance),
/// since the L1 and TopK variants have no natural variance. Initialized to
/// 1, with `running_mean` at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_sigma: Tensor,
    pub momentum: f64,
    pub kind: NormKind,
    pub features: usize,
}

impl BatchNormLayer {
    pub fn new(features: usize, kind: NormKind) -> Self {
        BatchNormLayer {
            gamma: Tensor::filled(vec![features], 1.0),
            beta: Tensor::zeros(vec![features]),
            running_mean: Tensor::zeros(vec![features]),
            running_sigma: Tensor::filled(vec![features], 1.0),
            momentum: DEFAULT_MOMENTUM,
            kind,
            features,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.features {
            return Err(Error::shape(format!(
                "batchnorm expects (m, {}) input, got {:?}",
                self.features,
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a training-mode forward call.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub input: Tensor,
    pub mean: Tensor,
    pub sigma: Tensor,
    pub x_hat: Tensor,
    pub topk_mask: Option<TopkMask>,
}

/// Batch-statistics forward without the running-stat update: the pure part
/// of training mode. Useful for gradient probes that must not mutate state.
pub fn bn_forward_batch(layer: &BatchNormLayer, x: &Tensor) -> Result<(Tensor, BnCache)> {
    layer.check_input(x)?;
    let (m, d) = (x.rows(), x.cols());
    let mu = mean_axis0(x)?;

    let (sigma, topk_mask) = match layer.kind {
        NormKind::L2 { eps } => (sigma_l2(x, &mu, eps)?, None),
        NormKind::L1 {
            eps,
            gauss_correction,
        } => {
            let mad = sigma_l1(x, &mu, 0.0)?;
            let c = if gauss_correction { GAUSS_L1_SCALE } else { 1.0 };
            (mad.map(|v| c * v + eps), None)
        }
        NormKind::TopK { eps, k } => {
            let (s, mask) = sigma_topk(x, &mu, k, eps)?;
            (s, Some(mask))
        }
    };

    let mut x_hat = Tensor::zeros(vec![m, d]);
    let mut y = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        for j in 0..d {
            let xh = (x.at2(i, j) - mu.data()[j]) / sigma.data()[j];
            *x_hat.at2_mut(i, j) = xh;
            *y.at2_mut(i, j) = layer.gamma.data()[j] * xh + layer.beta.data()[j];
        }
    }

    let cache = BnCache {
        input: x.clone(),
        mean: mu,
        sigma,
        x_hat,
        topk_mask,
    };
    Ok((y, cache))
}

/// Blends freshly computed batch statistics into the running statistics:
/// `running <- (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats(layer: &mut BatchNormLayer, mean: &Tensor, sigma: &Tensor) {
    let mom = layer.momentum;
    for j in 0..layer.features {
        layer.running_mean.data_mut()[j] =
            (1.0 - mom) * layer.running_mean.data()[j] + mom * mean.data()[j];
        layer.running_sigma.data_mut()[j] =
            (1.0 - mom) * layer.running_sigma.data()[j] + mom * sigma.data()[j];
    }
}

/// Training-mode forward: normalize by batch statistics, apply the affine
/// transform, and update the running statistics in place.
pub fn bn_forward_train(layer: &mut BatchNormLayer, x: &Tensor) -> Result<(Tensor, BnCache)> {
    let (y, cache) = bn_forward_batch(layer, x)?;
    update_running_stats(layer, &cache.mean, &cache.sigma);
    Ok((y, cache))
}

/// Inference-mode forward using the running statistics. No state mutation.
pub fn bn_forward_eval(layer: &BatchNormLayer, x: &Tensor) -> Result<Tensor> {
    layer.check_input(x)?;
    if layer.running_sigma.data().iter().any(|&s| s == 0.0) {
        return Err(Error::degenerate(
            "running sigma contains zero; layer has no usable inference statistics",
        ));
    }
    let (m, d) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        for j in 0..d {
            let xh = (x.at2(i, j) - layer.running_mean.data()[j]) / layer.running_sigma.data()[j];
            *y.at2_mut(i, j) = layer.gamma.data()[j] * xh + layer.beta.data()[j];
        }
    }
    Ok(y)
}

/// Gradients of the training-mode forward map with respect to the input and
/// the affine parameters, treating both batch statistics as functions of
/// the input.
///
/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(
    layer: &BatchNormLayer,
    cache: &BnCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    layer.check_input(dy)?;
    if dy.shape() != cache.x_hat.shape() {
        return Err(Error::shape(format!(
            "upstream gradient shape {:?} does not match cached batch {:?}",
            dy.shape(),
            cache.x_hat.shape()
        )));
    }
    let (m, d) = (dy.rows(), dy.cols());
    let mf = m as f64;

    let mut dx = Tensor::zeros(vec![m, d]);
    let mut dgamma = Tensor::zeros(vec![d]);
    let mut dbeta = Tensor::zeros(vec![d]);

    for j in 0..d {
        let gamma = layer.gamma.data()[j];
        let sigma = cache.sigma.data()[j];

        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        let mut dg = 0.0;
        let mut db = 0.0;
        for i in 0..m {
            let g = dy.at2(i, j);
            let xh = cache.x_hat.at2(i, j);
            db += g;
            dg += g * xh;
            let dxh = gamma * g;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        dgamma.data_mut()[j] = dg;
        dbeta.data_mut()[j] = db;

        // dsigma/dx_i per variant; sign(x_hat) equals sign(x - mu).
        match layer.kind {
            NormKind::L2 { .. } => {
                for i in 0..m {
                    let dxh = gamma * dy.at2(i, j);
                    let xh = cache.x_hat.at2(i, j);
                    let g_sigma = xh / mf;
                    *dx.at2_mut(i, j) =
                        (dxh - sum_dxhat / mf) / sigma - g_sigma * sum_dxhat_xhat / sigma;
                }
            }
            NormKind::L1 {
                gauss_correction, ..
            } => {
                let c = if gauss_correction { GAUSS_L1_SCALE } else { 1.0 };
                let mut sign_sum = 0.0;
                for i in 0..m {
                    sign_sum += sign0(cache.x_hat.at2(i, j));
                }
                let sign_mean = sign_sum / mf;
                for i in 0..m {
                    let dxh = gamma * dy.at2(i, j);
                    let s = sign0(cache.x_hat.at2(i, j));
                    let g_sigma = c / mf * (s - sign_mean);
                    *dx.at2_mut(i, j) =
                        (dxh - sum_dxhat / mf) / sigma - g_sigma * sum_dxhat_xhat / sigma;
                }
            }
            NormKind::TopK { .. } => {
                let mask = cache
                    .topk_mask
                    .as_ref()
                    .ok_or_else(|| Error::contract("topk cache is missing its selection mask"))?;
                let selected = &mask[j];
                let k_eff = selected.len() as f64;
                let mut sel_sign_sum = 0.0;
                for &i in selected {
                    sel_sign_sum += sign0(cache.x_hat.at2(i, j));
                }
                let mut in_mask = vec![false; m];
                for &i in selected {
                    in_mask[i] = true;
                }
                for i in 0..m {
                    let dxh = gamma * dy.at2(i, j);
                    let s = if in_mask[i] {
                        sign0(cache.x_hat.at2(i, j))
                    } else {
                        0.0
                    };
                    let g_sigma = (s - sel_sign_sum / mf) / k_eff;
                    *dx.at2_mut(i, j) =
                        (dxh - sum_dxhat / mf) / sigma - g_sigma * sum_dxhat_xhat / sigma;
                }
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Cache for gradients through the inference-mode transform, which is a
/// fixed affine map per feature.
#[derive(Debug, Clone)]
pub struct BnEvalCache {
    pub x_hat: Tensor,
}

/// Inference-mode forward that also returns what the eval backward needs.
pub fn bn_forward_eval_cached(
    layer: &BatchNormLayer,
    x: &Tensor,
) -> Result<(Tensor, BnEvalCache)> {
    layer.check_input(x)?;
    if layer.running_sigma.data().iter().any(|&s| s == 0.0) {
        return Err(Error::degenerate(
            "running sigma contains zero; layer has no usable inference statistics",
        ));
    }
    let (m, d) = (x.rows(), x.cols());
    let mut x_hat = Tensor::zeros(vec![m, d]);
    let mut y = Tensor::zeros(vec![m, d]);
    for i in 0..m {
        for j in 0..d {
            let xh = (x.at2(i, j) - layer.running_mean.data()[j]) / layer.running_sigma.data()[j];
            *x_hat.at2_mut(i, j) = xh;
            *y.at2_mut(i, j) = layer.gamma.data()[j] * xh + layer.beta.data()[j];
        }
    }
    Ok((y, BnEvalCache { x_hat }))
}

/// Gradients of the inference-mode transform. Running statistics are
/// constants here, so the input gradient is simply `gamma / running_sigma`.
pub fn bn_backward_eval(
    layer: &BatchNormLayer,
    cache: &BnEvalCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    layer.check_input(dy)?;
    let (m, d) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(vec![m, d]);
    let mut dgamma = Tensor::zeros(vec![d]);
    let mut dbeta = Tensor::zeros(vec![d]);
    for j in 0..d {
        let scale = layer.gamma.data()[j] / layer.running_sigma.data()[j];
        let mut dg = 0.0;
        let mut db = 0.0;
        for i in 0..m {
            let g = dy.at2(i, j);
            db += g;
            dg += g * cache.x_hat.at2(i, j);
            *dx.at2_mut(i, j) = g * scale;
        }
        dgamma.data_mut()[j] = dg;
        dbeta.data_mut()[j] = db;
    }
    Ok((dx, dgamma, dbeta))
}

#[inline]
fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
