//! Sequential model container with stable parameter addressing.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerCache, Mode, ParamRole};
use crate::norm::{update_running_stats, BatchNormLayer, NormKind};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Stable address of a trainable tensor: layer index plus role.
///
/// The ordering (layer, then role) fixes the parameter enumeration order
/// used everywhere gradients are keyed or flattened.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamPath {
    pub layer: usize,
    pub role: ParamRole,
}

impl ParamPath {
    pub fn new(layer: usize, role: ParamRole) -> Self {
        ParamPath { layer, role }
    }
}

impl std::fmt::Display for ParamPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.role)
    }
}

/// Gradient set keyed by parameter path. BTreeMap keeps iteration order
/// deterministic.
pub type Gradients = BTreeMap<ParamPath, Tensor>;

#[derive(Debug, Clone)]
pub struct SequentialModel {
    pub layers: Vec<Layer>,
}

impl SequentialModel {
    pub fn new(layers: Vec<Layer>) -> Self {
        SequentialModel { layers }
    }

    /// Trainable parameter paths in stable order.
    pub fn param_paths(&self) -> Vec<ParamPath> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (role, _) in layer.params() {
                out.push(ParamPath::new(i, role));
            }
        }
        out
    }

    pub fn param(&self, path: ParamPath) -> Option<&Tensor> {
        self.layers.get(path.layer).and_then(|layer| {
            layer
                .params()
                .into_iter()
                .find(|(role, _)| *role == path.role)
                .map(|(_, t)| t)
        })
    }

    pub fn param_mut(&mut self, path: ParamPath) -> Option<&mut Tensor> {
        self.layers.get_mut(path.layer).and_then(|layer| {
            layer
                .params_mut()
                .into_iter()
                .find(|(role, _)| *role == path.role)
                .map(|(_, t)| t)
        })
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Pure forward pass with train-mode batch statistics; running
    /// statistics are left untouched. Used by gradient checks and by
    /// [`SequentialModel::forward_train`].
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&act, Mode::Train).map_err(|e| at_layer(i, layer, e))?;
            caches.push(cache);
            act = y;
        }
        Ok((act, caches))
    }

    /// Training-mode forward: batch statistics plus the running-stat update.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let (y, caches) = self.forward_batch(x)?;
        for (layer, cache) in self.layers.iter_mut().zip(&caches) {
            if let (Layer::BatchNorm(bn), LayerCache::BatchNorm(bn_cache)) = (layer, cache) {
                if let Some((mean, sigma)) = bn_cache.batch_stats() {
                    update_running_stats(bn, mean, sigma);
                }
            }
        }
        Ok((y, caches))
    }

    /// Inference-mode forward; no state mutation.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, _) = layer.forward(&act, Mode::Eval).map_err(|e| at_layer(i, layer, e))?;
            act = y;
        }
        Ok(act)
    }

    /// Inference-mode forward that keeps caches so gradients can be taken
    /// with the running statistics frozen.
    pub fn forward_eval_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&act, Mode::Eval).map_err(|e| at_layer(i, layer, e))?;
            caches.push(cache);
            act = y;
        }
        Ok((act, caches))
    }

    /// Backpropagates `dlogits` through the cached forward pass, returning
    /// gradients for every trainable parameter.
    pub fn backward(&self, caches: &[LayerCache], dlogits: &Tensor) -> Result<Gradients> {
        if caches.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "cache count {} does not match layer count {}",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = Gradients::new();
        let mut upstream = dlogits.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let (dx, param_grads) = layer.backward(cache, &upstream).map_err(|e| at_layer(i, layer, e))?;
            for (role, grad) in param_grads {
                grads.insert(ParamPath::new(i, role), grad);
            }
            upstream = dx;
        }
        Ok(grads)
    }

    /// `p <- p - lr * g` for every trainable parameter. The gradient keys
    /// must match the model's parameter paths exactly.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) -> Result<()> {
        let paths = self.param_paths();
        if grads.len() != paths.len() {
            return Err(Error::contract(format!(
                "gradient set has {} entries, model has {} parameters",
                grads.len(),
                paths.len()
            )));
        }
        for path in paths {
            let grad = grads
                .get(&path)
                .ok_or_else(|| Error::contract(format!("missing gradient for {path}")))?;
            let param = self
                .param_mut(path)
                .expect("path enumerated from this model");
            if grad.shape() != param.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {path} {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *p -= learning_rate * g;
            }
        }
        Ok(())
    }

    /// Concatenates a gradient set into one flat vector in stable path order.
    pub fn flatten_grads(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for path in self.param_paths() {
            if let Some(g) = grads.get(&path) {
                out.extend_from_slice(g.data());
            }
        }
        out
    }
}

fn at_layer(index: usize, layer: &Layer, err: Error) -> Error {
    match err {
        Error::Shape(msg) => Error::Shape(format!(
            "layer {index} ({}): {msg}",
            layer.kind_name()
        )),
        other => other,
    }
}

/// Uniform fan-in initialization: draws from `U(-sqrt(6/fan_in), +sqrt(6/fan_in))`.
fn init_uniform(rng: &mut SeededRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("positive extents")
}

/// MLP over flat inputs: `Flatten`, then for each hidden width a
/// `Dense -> BatchNorm -> ReLU` block, then a final `Dense` head.
pub fn build_mlp(
    rng: &mut SeededRng,
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    kind: NormKind,
) -> SequentialModel {
    let mut layers = vec![Layer::Flatten];
    let mut width = input_dim;
    for (h, &next) in hidden.iter().enumerate() {
        let mut stream = rng.child(h as u64);
        layers.push(Layer::Dense {
            weight: init_uniform(&mut stream, vec![width, next], width),
            bias: Tensor::zeros(vec![next]),
        });
        layers.push(Layer::BatchNorm(BatchNormLayer::new(next, kind)));
        layers.push(Layer::ReLU);
        width = next;
    }
    let mut stream = rng.child(hidden.len() as u64);
    layers.push(Layer::Dense {
        weight: init_uniform(&mut stream, vec![width, classes], width),
        bias: Tensor::zeros(vec![classes]),
    });
    SequentialModel::new(layers)
}

/// Small CNN: two `Conv2d -> BatchNorm -> ReLU` blocks, flatten, a
/// `Dense -> BatchNorm -> ReLU` block, and a `Dense` head.
#[allow(clippy::too_many_arguments)]
pub fn build_cnn(
    rng: &mut SeededRng,
    in_channels: usize,
    in_height: usize,
    in_width: usize,
    conv_channels: [usize; 2],
    kernel: usize,
    dense_width: usize,
    classes: usize,
    kind: NormKind,
) -> Result<SequentialModel> {
    let mut layers = Vec::new();
    let mut c = in_channels;
    let (mut h, mut w) = (in_height, in_width);
    for (b, &cout) in conv_channels.iter().enumerate() {
        if h < kernel || w < kernel {
            return Err(Error::shape(format!(
                "conv block {b}: spatial extent {h}x{w} smaller than kernel {kernel}"
            )));
        }
        let fan_in = c * kernel * kernel;
        let mut stream = rng.child(b as u64);
        layers.push(Layer::Conv2d {
            kernel: init_uniform(&mut stream, vec![cout, c, kernel, kernel], fan_in),
            bias: Tensor::zeros(vec![cout]),
            stride: 1,
        });
        layers.push(Layer::BatchNorm(BatchNormLayer::new(cout, kind)));
        layers.push(Layer::ReLU);
        c = cout;
        h = h - kernel + 1;
        w = w - kernel + 1;
    }
    layers.push(Layer::Flatten);
    let flat = c * h * w;
    let mut stream = rng.child(2);
    layers.push(Layer::Dense {
        weight: init_uniform(&mut stream, vec![flat, dense_width], flat),
        bias: Tensor::zeros(vec![dense_width]),
    });
    layers.push(Layer::BatchNorm(BatchNormLayer::new(dense_width, kind)));
    layers.push(Layer::ReLU);
    let mut stream = rng.child(3);
    layers.push(Layer::Dense {
        weight: init_uniform(&mut stream, vec![dense_width, classes], dense_width),
        bias: Tensor::zeros(vec![classes]),
    });
    Ok(SequentialModel::new(layers))
}
