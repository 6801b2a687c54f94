//! Network layers: dense, 2-D convolution (valid padding), ReLU, flatten,
//! and BatchNorm.
//!
//! Convolutional activations use `(batch, channels, height, width)` layout.
//! BatchNorm on a rank-4 input folds the spatial positions into the batch
//! axis so statistics are per channel, then unfolds the result.

use crate::error::{Error, Result};
use crate::norm::{
    bn_backward, bn_backward_eval, bn_forward_batch, bn_forward_eval_cached, BatchNormLayer,
    BnCache, BnEvalCache,
};
use crate::tensor::{matmul, transpose, Tensor};

/// Forward-pass mode. Training mode normalizes by batch statistics; eval
/// mode uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Roles a trainable tensor can play inside a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
}

impl std::fmt::Display for ParamRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected: `y = x W + b`, weight shape `(in, out)`.
    Dense { weight: Tensor, bias: Tensor },
    /// 2-D convolution, valid padding, kernel shape `(cout, cin, kh, kw)`.
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
    },
    ReLU,
    /// Collapses everything after the batch axis: `(n, ...) -> (n, prod)`.
    Flatten,
    BatchNorm(BatchNormLayer),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::ReLU => "relu",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batchnorm",
        }
    }

    /// Trainable tensors in stable role order.
    pub fn params(&self) -> Vec<(ParamRole, &Tensor)> {
        match self {
            Layer::Dense { weight, bias } => {
                vec![(ParamRole::Weight, weight), (ParamRole::Bias, bias)]
            }
            Layer::Conv2d { kernel, bias, .. } => {
                vec![(ParamRole::Weight, kernel), (ParamRole::Bias, bias)]
            }
            Layer::ReLU | Layer::Flatten => vec![],
            Layer::BatchNorm(bn) => vec![(ParamRole::Gamma, &bn.gamma), (ParamRole::Beta, &bn.beta)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        match self {
            Layer::Dense { weight, bias } => {
                vec![(ParamRole::Weight, weight), (ParamRole::Bias, bias)]
            }
            Layer::Conv2d { kernel, bias, .. } => {
                vec![(ParamRole::Weight, kernel), (ParamRole::Bias, bias)]
            }
            Layer::ReLU | Layer::Flatten => vec![],
            Layer::BatchNorm(bn) => vec![
                (ParamRole::Gamma, &mut bn.gamma),
                (ParamRole::Beta, &mut bn.beta),
            ],
        }
    }

    /// Pure forward pass. BatchNorm in train mode computes batch statistics
    /// but does not touch the running statistics; the model applies that
    /// update separately so gradient probes stay side-effect free.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
        match self {
            Layer::Dense { weight, bias } => dense_forward(weight, bias, x),
            Layer::Conv2d {
                kernel,
                bias,
                stride,
            } => conv2d_forward(kernel, bias, *stride, x),
            Layer::ReLU => {
                let y = x.map(|v| if v > 0.0 { v } else { 0.0 });
                Ok((y, LayerCache::ReLU { input: x.clone() }))
            }
            Layer::Flatten => {
                let n = x.shape()[0];
                let rest: usize = x.shape()[1..].iter().product();
                let input_shape = x.shape().to_vec();
                let y = x.clone().reshape(vec![n, rest])?;
                Ok((y, LayerCache::Flatten { input_shape }))
            }
            Layer::BatchNorm(bn) => bn_layer_forward(bn, x, mode),
        }
    }

    /// Backward pass through this layer. Returns the input gradient and the
    /// parameter gradients in the same role order as [`Layer::params`].
    pub fn backward(
        &self,
        cache: &LayerCache,
        dy: &Tensor,
    ) -> Result<(Tensor, Vec<(ParamRole, Tensor)>)> {
        match (self, cache) {
            (Layer::Dense { weight, .. }, LayerCache::Dense { input }) => {
                dense_backward(weight, input, dy)
            }
            (
                Layer::Conv2d {
                    kernel, stride, ..
                },
                LayerCache::Conv2d { input },
            ) => conv2d_backward(kernel, *stride, input, dy),
            (Layer::ReLU, LayerCache::ReLU { input }) => {
                if input.shape() != dy.shape() {
                    return Err(Error::shape("relu gradient shape mismatch"));
                }
                let data = input
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((
                    Tensor::from_vec(input.shape().to_vec(), data)?,
                    vec![],
                ))
            }
            (Layer::Flatten, LayerCache::Flatten { input_shape }) => {
                let dx = dy.clone().reshape(input_shape.clone())?;
                Ok((dx, vec![]))
            }
            (Layer::BatchNorm(bn), LayerCache::BatchNorm(bn_cache)) => {
                bn_layer_backward(bn, bn_cache, dy)
            }
            _ => Err(Error::contract(format!(
                "stale cache: {} layer received a {} cache",
                self.kind_name(),
                cache.kind_name()
            ))),
        }
    }
}

/// Per-layer forward state consumed by the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Dense { input: Tensor },
    Conv2d { input: Tensor },
    ReLU { input: Tensor },
    Flatten { input_shape: Vec<usize> },
    BatchNorm(BnLayerCache),
}

impl LayerCache {
    fn kind_name(&self) -> &'static str {
        match self {
            LayerCache::Dense { .. } => "dense",
            LayerCache::Conv2d { .. } => "conv2d",
            LayerCache::ReLU { .. } => "relu",
            LayerCache::Flatten { .. } => "flatten",
            LayerCache::BatchNorm(_) => "batchnorm",
        }
    }
}

/// BatchNorm cache plus the original rank-4 shape when the input was folded.
#[derive(Debug, Clone)]
pub enum BnLayerCache {
    Train {
        cache: BnCache,
        folded_from: Option<Vec<usize>>,
    },
    Eval {
        cache: BnEvalCache,
        folded_from: Option<Vec<usize>>,
    },
}

impl BnLayerCache {
    /// Batch statistics of a train-mode cache, for the running-stat update.
    pub fn batch_stats(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            BnLayerCache::Train { cache, .. } => Some((&cache.mean, &cache.sigma)),
            BnLayerCache::Eval { .. } => None,
        }
    }
}

fn dense_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<(Tensor, LayerCache)> {
    if x.rank() != 2 {
        return Err(Error::shape(format!(
            "dense expects rank-2 input, got {:?}",
            x.shape()
        )));
    }
    let mut y = matmul(x, weight)?;
    let (m, out) = (y.rows(), y.cols());
    if bias.len() != out {
        return Err(Error::shape(format!(
            "dense bias length {} does not match output width {}",
            bias.len(),
            out
        )));
    }
    for i in 0..m {
        for j in 0..out {
            *y.at2_mut(i, j) += bias.data()[j];
        }
    }
    Ok((y, LayerCache::Dense { input: x.clone() }))
}

fn dense_backward(
    weight: &Tensor,
    input: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Vec<(ParamRole, Tensor)>)> {
    let dw = matmul(&transpose(input), dy)?;
    let dx = matmul(dy, &transpose(weight))?;
    let (m, out) = (dy.rows(), dy.cols());
    let mut db = vec![0.0; out];
    for i in 0..m {
        for (acc, &g) in db.iter_mut().zip(dy.row(i)) {
            *acc += g;
        }
    }
    let db = Tensor::from_vec(vec![out], db)?;
    Ok((
        dx,
        vec![(ParamRole::Weight, dw), (ParamRole::Bias, db)],
    ))
}

fn conv2d_forward(
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    x: &Tensor,
) -> Result<(Tensor, LayerCache)> {
    if x.rank() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects rank-4 input (n, c, h, w), got {:?}",
            x.shape()
        )));
    }
    let (cout, cin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if c != cin {
        return Err(Error::shape(format!(
            "conv2d kernel expects {cin} input channels, got {c}"
        )));
    }
    if h < kh || w < kw {
        return Err(Error::shape(format!(
            "conv2d input {h}x{w} smaller than kernel {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(Error::param("conv2d stride must be >= 1"));
    }
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let mut y = Tensor::zeros(vec![n, cout, oh, ow]);
    for ni in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += kernel.at4(co, ci, u, v)
                                    * x.at4(ni, ci, oi * stride + u, oj * stride + v);
                            }
                        }
                    }
                    *y.at4_mut(ni, co, oi, oj) = acc;
                }
            }
        }
    }
    Ok((y, LayerCache::Conv2d { input: x.clone() }))
}

fn conv2d_backward(
    kernel: &Tensor,
    stride: usize,
    input: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Vec<(ParamRole, Tensor)>)> {
    let (cout, cin, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (n, _, _, _) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    if dy.rank() != 4 || dy.shape()[0] != n || dy.shape()[1] != cout {
        return Err(Error::shape(format!(
            "conv2d gradient shape {:?} does not match cached input",
            dy.shape()
        )));
    }
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
    let mut dx = Tensor::zeros(input.shape().to_vec());
    let mut dk = Tensor::zeros(kernel.shape().to_vec());
    let mut db = Tensor::zeros(vec![cout]);
    for ni in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let g = dy.at4(ni, co, oi, oj);
                    if g == 0.0 {
                        continue;
                    }
                    db.data_mut()[co] += g;
                    for ci in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                *dk.at4_mut(co, ci, u, v) +=
                                    g * input.at4(ni, ci, oi * stride + u, oj * stride + v);
                                *dx.at4_mut(ni, ci, oi * stride + u, oj * stride + v) +=
                                    g * kernel.at4(co, ci, u, v);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        dx,
        vec![(ParamRole::Weight, dk), (ParamRole::Bias, db)],
    ))
}

/// `(n, c, h, w) -> (n*h*w, c)`: spatial positions join the batch axis so
/// BatchNorm statistics are per channel.
fn fold_spatial(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(vec![n * h * w, c]);
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let row = (ni * h + hi) * w + wi;
                    *out.at2_mut(row, ci) = x.at4(ni, ci, hi, wi);
                }
            }
        }
    }
    out
}

/// Inverse of [`fold_spatial`].
fn unfold_spatial(folded: &Tensor, shape4: &[usize]) -> Tensor {
    let (n, c, h, w) = (shape4[0], shape4[1], shape4[2], shape4[3]);
    let mut out = Tensor::zeros(shape4.to_vec());
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let row = (ni * h + hi) * w + wi;
                    *out.at4_mut(ni, ci, hi, wi) = folded.at2(row, ci);
                }
            }
        }
    }
    out
}

fn bn_layer_forward(bn: &BatchNormLayer, x: &Tensor, mode: Mode) -> Result<(Tensor, LayerCache)> {
    let (x2, folded_from) = match x.rank() {
        2 => (x.clone(), None),
        4 => (fold_spatial(x), Some(x.shape().to_vec())),
        r => {
            return Err(Error::shape(format!(
                "batchnorm expects rank-2 or rank-4 input, got rank {r}"
            )))
        }
    };
    match mode {
        Mode::Train => {
            let (y2, cache) = bn_forward_batch(bn, &x2)?;
            let y = match &folded_from {
                Some(shape4) => unfold_spatial(&y2, shape4),
                None => y2,
            };
            Ok((
                y,
                LayerCache::BatchNorm(BnLayerCache::Train { cache, folded_from }),
            ))
        }
        Mode::Eval => {
            let (y2, cache) = bn_forward_eval_cached(bn, &x2)?;
            let y = match &folded_from {
                Some(shape4) => unfold_spatial(&y2, shape4),
                None => y2,
            };
            Ok((
                y,
                LayerCache::BatchNorm(BnLayerCache::Eval { cache, folded_from }),
            ))
        }
    }
}

fn bn_layer_backward(
    bn: &BatchNormLayer,
    cache: &BnLayerCache,
    dy: &Tensor,
) -> Result<(Tensor, Vec<(ParamRole, Tensor)>)> {
    let (folded_from, dy2) = match cache {
        BnLayerCache::Train { folded_from, .. } | BnLayerCache::Eval { folded_from, .. } => {
            match folded_from {
                Some(shape4) => {
                    if dy.shape() != &shape4[..] {
                        return Err(Error::shape(
                            "batchnorm gradient shape does not match cached input",
                        ));
                    }
                    (Some(shape4), fold_spatial(dy))
                }
                None => (None, dy.clone()),
            }
        }
    };
    let (dx2, dgamma, dbeta) = match cache {
        BnLayerCache::Train { cache, .. } => bn_backward(bn, cache, &dy2)?,
        BnLayerCache::Eval { cache, .. } => bn_backward_eval(bn, cache, &dy2)?,
    };
    let dx = match folded_from {
        Some(shape4) => unfold_spatial(&dx2, shape4),
        None => dx2,
    };
    Ok((
        dx,
        vec![(ParamRole::Gamma, dgamma), (ParamRole::Beta, dbeta)],
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::norm::NormKind;

    #[test]
    fn dense_forward_hand_case() {
        let layer = Layer::Dense {
            weight: Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            bias: Tensor::from_vec(vec![1], vec![0.5]).unwrap(),
        };
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.data(), &[3.5]);
    }

    #[test]
    fn relu_clamps_and_masks() {
        let layer = Layer::ReLU;
        let x = Tensor::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let dy = Tensor::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let (dx, _) = layer.backward(&cache, &dy).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn flatten_roundtrip() {
        let layer = Layer::Flatten;
        let x = Tensor::from_vec(vec![2, 1, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        let (dx, _) = layer.backward(&cache, &y).unwrap();
        assert_eq!(dx.shape(), &[2, 1, 2, 2]);
        assert_eq!(dx.data(), x.data());
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 and zero bias pass the input through.
        let layer = Layer::Conv2d {
            kernel: Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
        };
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_known_sum() {
        // 2x2 all-ones kernel sums each window.
        let layer = Layer::Conv2d {
            kernel: Tensor::filled(vec![1, 1, 2, 2], 1.0),
            bias: Tensor::zeros(vec![1]),
            stride: 1,
        };
        let x = Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn conv2d_stride_two() {
        let layer = Layer::Conv2d {
            kernel: Tensor::filled(vec![1, 1, 1, 1], 1.0),
            bias: Tensor::zeros(vec![1]),
            stride: 2,
        };
        let x = Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 3.0, 7.0, 9.0]);
    }

    #[test]
    fn fold_unfold_roundtrip() {
        let x = Tensor::from_vec(vec![2, 3, 2, 2], (0..24).map(|v| v as f64).collect()).unwrap();
        let folded = fold_spatial(&x);
        assert_eq!(folded.shape(), &[8, 3]);
        // channel values of sample 0, position (0,0) land in row 0
        assert_eq!(folded.row(0), &[x.at4(0, 0, 0, 0), x.at4(0, 1, 0, 0), x.at4(0, 2, 0, 0)]);
        let back = unfold_spatial(&folded, x.shape());
        assert_eq!(back, x);
    }

    #[test]
    fn batchnorm_rank4_uses_per_channel_stats() {
        let bn = BatchNormLayer::new(2, NormKind::l2());
        let layer = Layer::BatchNorm(bn);
        // one sample, 2 channels, 2x2 spatial: channel stats over 4 positions
        let x = Tensor::from_vec(
            vec![1, 2, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0],
        )
        .unwrap();
        let (y, _) = layer.forward(&x, Mode::Train).unwrap();
        // channel 1 is constant, so its normalized output is ~0 everywhere
        for hi in 0..2 {
            for wi in 0..2 {
                assert!(y.at4(0, 1, hi, wi).abs() < 1e-9);
            }
        }
        // channel 0 normalized values are symmetric around 0
        let mean: f64 = (0..2)
            .flat_map(|hi| (0..2).map(move |wi| (hi, wi)))
            .map(|(hi, wi)| y.at4(0, 0, hi, wi))
            .sum::<f64>()
            / 4.0;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn stale_cache_detected() {
        let dense = Layer::Dense {
            weight: Tensor::zeros(vec![2, 2]),
            bias: Tensor::zeros(vec![2]),
        };
        let relu_cache = LayerCache::ReLU {
            input: Tensor::zeros(vec![1, 2]),
        };
        let dy = Tensor::zeros(vec![1, 2]);
        assert!(matches!(
            dense.backward(&relu_cache, &dy),
            Err(Error::Contract(_))
        ));
    }
}
