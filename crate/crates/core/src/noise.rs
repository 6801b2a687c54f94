//! Weight-noise robustness harness.
//!
//! A trained model is evaluated clean (the baseline), then repeatedly
//! perturbed with additive Gaussian noise whose standard deviation is
//! proportional to each tensor's own weight spread:
//!
//! ```text
//! sigma_noise = eta * sigma_w        (eta = 1 / SNR)
//! w' = w + N(0, sigma_noise^2)       per element
//! ```
//!
//! Accuracies are averaged over repeated trials per `eta`, normalized by
//! the baseline, and summarized as the mean normalized accuracy over the
//! non-baseline noise levels.
//!
//! Every trial draws from a child stream derived from
//! `(base_seed, eta index, trial index)`, so results are identical no
//! matter how trials are scheduled. `run_sweep` is sequential;
//! [`par_run_sweep`] distributes trials with rayon and produces the same
//! bytes.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::ParamRole;
use crate::model::{ParamPath, SequentialModel};
use crate::rng::SeededRng;
use crate::train::evaluate_accuracy;

/// Default noise form factors: 1%, 4%, 8%, 12%, 16%, 20%.
pub const DEFAULT_ETAS: [f64; 6] = [0.01, 0.04, 0.08, 0.12, 0.16, 0.20];
pub const DEFAULT_REPEATS: usize = 20;

/// Which tensors receive noise. Dense and convolution weights always do;
/// biases and the BatchNorm affine parameters are opt-in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbScope {
    #[serde(default)]
    pub biases: bool,
    #[serde(default)]
    pub bn_params: bool,
}

impl PerturbScope {
    fn includes(&self, role: ParamRole) -> bool {
        match role {
            ParamRole::Weight => true,
            ParamRole::Bias => self.biases,
            ParamRole::Gamma | ParamRole::Beta => self.bn_params,
        }
    }
}

/// Sweep parameters: the eta schedule, trials per eta, the base seed, and
/// the perturbation scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepConfig {
    pub etas: Vec<f64>,
    pub repeats: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub scope: PerturbScope,
}

impl NoiseSweepConfig {
    /// Validates and normalizes: etas must be finite and non-negative; they
    /// are sorted ascending and deduplicated.
    pub fn new(etas: Vec<f64>, repeats: usize, base_seed: u64, scope: PerturbScope) -> Result<Self> {
        if etas.is_empty() {
            return Err(Error::param("eta schedule is empty"));
        }
        if let Some(&bad) = etas.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::param(format!("eta values must be >= 0, got {bad}")));
        }
        if repeats < 1 {
            return Err(Error::param("repeats must be >= 1"));
        }
        let mut etas = etas;
        etas.sort_by(|a, b| a.partial_cmp(b).expect("finite etas"));
        etas.dedup();
        Ok(NoiseSweepConfig {
            etas,
            repeats,
            base_seed,
            scope,
        })
    }

    pub fn with_defaults(base_seed: u64) -> Self {
        NoiseSweepConfig {
            etas: DEFAULT_ETAS.to_vec(),
            repeats: DEFAULT_REPEATS,
            base_seed,
            scope: PerturbScope::default(),
        }
    }
}

/// Weight-spread snapshot of one perturbable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNoiseStats {
    pub path: String,
    pub sigma_w: f64,
    pub elements: usize,
}

impl LayerNoiseStats {
    /// Noise level this tensor receives at a given form factor.
    pub fn sigma_noise(&self, eta: f64) -> f64 {
        eta * self.sigma_w
    }
}

/// One noise level of a sweep: every trial accuracy, their mean, the
/// baseline-normalized mean, and the per-tensor noise sigmas
/// (parallel to `SweepResult::layers`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaResult {
    pub eta: f64,
    pub sigma_noise: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
    pub normalized: f64,
}

/// Full sweep outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Clean-model accuracy (the eta = 0 reference).
    pub baseline: f64,
    /// Weight-spread snapshot of the clean model.
    pub layers: Vec<LayerNoiseStats>,
    pub per_eta: Vec<EtaResult>,
    /// Mean normalized accuracy over the non-zero etas; absent when the
    /// schedule contains only eta = 0.
    pub average_normalized: Option<f64>,
}

/// Paths of the tensors the scope perturbs, in stable order.
fn perturbable_paths(model: &SequentialModel, scope: PerturbScope) -> Vec<ParamPath> {
    model
        .param_paths()
        .into_iter()
        .filter(|p| scope.includes(p.role))
        .collect()
}

/// Population standard deviation of every perturbable tensor.
pub fn layer_weight_std(
    model: &SequentialModel,
    scope: PerturbScope,
) -> Result<Vec<LayerNoiseStats>> {
    let paths = perturbable_paths(model, scope);
    if paths.is_empty() {
        return Err(Error::config(
            "model has no perturbable parameters under the configured scope",
        ));
    }
    Ok(paths
        .into_iter()
        .map(|path| {
            let tensor = model.param(path).expect("enumerated from this model");
            LayerNoiseStats {
                path: path.to_string(),
                sigma_w: tensor.population_std(),
                elements: tensor.len(),
            }
        })
        .collect())
}

/// Returns a perturbed copy: `w' = w + N(0, (eta * sigma_w)^2)` i.i.d. per
/// element, with `sigma_w` taken from the model passed in. The input model
/// is untouched. `eta = 0` (or a constant tensor, whose spread is zero)
/// yields an identical copy.
pub fn inject_noise(
    model: &SequentialModel,
    eta: f64,
    scope: PerturbScope,
    rng: &mut SeededRng,
) -> Result<SequentialModel> {
    if !(eta >= 0.0) {
        return Err(Error::param(format!("eta must be >= 0, got {eta}")));
    }
    let mut copy = model.clone();
    if eta == 0.0 {
        return Ok(copy);
    }
    for path in perturbable_paths(model, scope) {
        let sigma_w = model
            .param(path)
            .expect("enumerated from this model")
            .population_std();
        let sigma_noise = eta * sigma_w;
        if sigma_noise == 0.0 {
            continue;
        }
        let tensor = copy.param_mut(path).expect("copy has the same paths");
        for v in tensor.data_mut() {
            *v += rng.normal(0.0, sigma_noise);
        }
    }
    Ok(copy)
}

/// `a_avg / a_o`: degradation relative to the clean model.
pub fn normalized_accuracy(a_avg: f64, a_o: f64) -> Result<f64> {
    if a_o <= 0.0 {
        return Err(Error::degenerate(format!(
            "baseline accuracy must be positive to normalize, got {a_o}"
        )));
    }
    Ok(a_avg / a_o)
}

/// Arithmetic mean of per-eta normalized accuracies.
pub fn average_normalized_accuracy(per_eta: &[f64]) -> Result<f64> {
    if per_eta.is_empty() {
        return Err(Error::param(
            "average_normalized_accuracy needs at least one value",
        ));
    }
    Ok(per_eta.iter().sum::<f64>() / per_eta.len() as f64)
}

/// Runs all `(eta, trial)` evaluations sequentially.
pub fn run_sweep(
    model: &SequentialModel,
    dataset: &Dataset,
    cfg: &NoiseSweepConfig,
) -> Result<SweepResult> {
    let plan = SweepPlan::prepare(model, dataset, cfg)?;
    let mut accuracies = Vec::with_capacity(plan.tasks.len());
    for &(ei, trial) in &plan.tasks {
        accuracies.push(plan.run_trial(ei, trial)?);
    }
    plan.assemble(accuracies)
}

/// Rayon-parallel sweep; bit-identical to [`run_sweep`] because every trial
/// owns a stream derived from its `(eta, trial)` index and results are
/// stored by index.
#[cfg(feature = "parallel")]
pub fn par_run_sweep(
    model: &SequentialModel,
    dataset: &Dataset,
    cfg: &NoiseSweepConfig,
) -> Result<SweepResult> {
    use rayon::prelude::*;
    let plan = SweepPlan::prepare(model, dataset, cfg)?;
    let accuracies: Vec<f64> = plan
        .tasks
        .par_iter()
        .map(|&(ei, trial)| plan.run_trial(ei, trial))
        .collect::<Result<Vec<f64>>>()?;
    plan.assemble(accuracies)
}

struct SweepPlan<'a> {
    model: &'a SequentialModel,
    dataset: &'a Dataset,
    cfg: &'a NoiseSweepConfig,
    layers: Vec<LayerNoiseStats>,
    baseline: f64,
    root: SeededRng,
    /// `(eta index, trial index)` in assembly order.
    tasks: Vec<(usize, usize)>,
}

impl<'a> SweepPlan<'a> {
    fn prepare(
        model: &'a SequentialModel,
        dataset: &'a Dataset,
        cfg: &'a NoiseSweepConfig,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::degenerate("cannot sweep over an empty dataset"));
        }
        if cfg.repeats < 1 {
            return Err(Error::param("repeats must be >= 1"));
        }
        let layers = layer_weight_std(model, cfg.scope)?;
        let baseline = evaluate_accuracy(model, dataset)?;
        if baseline <= 0.0 {
            return Err(Error::degenerate(
                "baseline accuracy is zero; normalized metrics are undefined",
            ));
        }
        let mut tasks = Vec::with_capacity(cfg.etas.len() * cfg.repeats);
        for ei in 0..cfg.etas.len() {
            for trial in 0..cfg.repeats {
                tasks.push((ei, trial));
            }
        }
        Ok(SweepPlan {
            model,
            dataset,
            cfg,
            layers,
            baseline,
            root: SeededRng::new(cfg.base_seed),
            tasks,
        })
    }

    fn run_trial(&self, eta_index: usize, trial: usize) -> Result<f64> {
        let eta = self.cfg.etas[eta_index];
        let mut rng = self.root.child(eta_index as u64).child(trial as u64);
        let perturbed = inject_noise(self.model, eta, self.cfg.scope, &mut rng)?;
        evaluate_accuracy(&perturbed, self.dataset)
    }

    fn assemble(self, accuracies: Vec<f64>) -> Result<SweepResult> {
        let n = self.cfg.repeats;
        let mut per_eta = Vec::with_capacity(self.cfg.etas.len());
        for (ei, &eta) in self.cfg.etas.iter().enumerate() {
            let trials = accuracies[ei * n..(ei + 1) * n].to_vec();
            let mean_accuracy = trials.iter().sum::<f64>() / n as f64;
            let normalized = normalized_accuracy(mean_accuracy, self.baseline)?;
            let sigma_noise = self.layers.iter().map(|l| l.sigma_noise(eta)).collect();
            per_eta.push(EtaResult {
                eta,
                sigma_noise,
                accuracies: trials,
                mean_accuracy,
                normalized,
            });
        }
        let non_baseline: Vec<f64> = per_eta
            .iter()
            .filter(|e| e.eta > 0.0)
            .map(|e| e.normalized)
            .collect();
        let average_normalized = if non_baseline.is_empty() {
            None
        } else {
            Some(average_normalized_accuracy(&non_baseline)?)
        };
        Ok(SweepResult {
            baseline: self.baseline,
            layers: self.layers,
            per_eta,
            average_normalized,
        })
    }
}

/// Rebuilds sweep metrics from externally supplied trial accuracies
/// (`eta -> ordered trial accuracies`), normalizing by `baseline`. Used by
/// the cross-check path that reads a trials CSV instead of running a model.
pub fn summarize_trials(groups: &[(f64, Vec<f64>)], baseline: f64) -> Result<SweepResult> {
    if groups.is_empty() {
        return Err(Error::param("no trial groups supplied"));
    }
    if baseline <= 0.0 {
        return Err(Error::degenerate(format!(
            "baseline accuracy must be positive to normalize, got {baseline}"
        )));
    }
    let mut per_eta = Vec::with_capacity(groups.len());
    for (eta, trials) in groups {
        if trials.is_empty() {
            return Err(Error::param(format!("eta {eta} has no trials")));
        }
        let mean_accuracy = trials.iter().sum::<f64>() / trials.len() as f64;
        per_eta.push(EtaResult {
            eta: *eta,
            sigma_noise: Vec::new(),
            accuracies: trials.clone(),
            mean_accuracy,
            normalized: normalized_accuracy(mean_accuracy, baseline)?,
        });
    }
    let non_baseline: Vec<f64> = per_eta
        .iter()
        .filter(|e| e.eta > 0.0)
        .map(|e| e.normalized)
        .collect();
    let average_normalized = if non_baseline.is_empty() {
        None
    } else {
        Some(average_normalized_accuracy(&non_baseline)?)
    };
    Ok(SweepResult {
        baseline,
        layers: Vec::new(),
        per_eta,
        average_normalized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Layer;
    use crate::tensor::Tensor;

    fn dense_model(weights: Vec<f64>, rows: usize, cols: usize) -> SequentialModel {
        SequentialModel::new(vec![Layer::Dense {
            weight: Tensor::from_vec(vec![rows, cols], weights).unwrap(),
            bias: Tensor::zeros(vec![cols]),
        }])
    }

    #[test]
    fn weight_std_hand_cases() {
        let model = dense_model(vec![-1.0, 1.0], 2, 1);
        let stats = layer_weight_std(&model, PerturbScope::default()).unwrap();
        assert_eq!(stats.len(), 1);
        assert_eq!(stats[0].path, "layer0.weight");
        assert_eq!(stats[0].sigma_w, 1.0);
        assert_eq!(stats[0].elements, 2);

        let model = dense_model(vec![5.0, 5.0, 5.0, 5.0], 2, 2);
        let stats = layer_weight_std(&model, PerturbScope::default()).unwrap();
        assert_eq!(stats[0].sigma_w, 0.0);

        let model = dense_model(vec![1.0, 2.0, 3.0, 4.0], 4, 1);
        let stats = layer_weight_std(&model, PerturbScope::default()).unwrap();
        assert!((stats[0].sigma_w - 5.0f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn weight_std_requires_perturbable_params() {
        let model = SequentialModel::new(vec![Layer::ReLU]);
        assert!(matches!(
            layer_weight_std(&model, PerturbScope::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scope_controls_selection() {
        let model = SequentialModel::new(vec![
            Layer::Dense {
                weight: Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap(),
                bias: Tensor::from_vec(vec![2], vec![0.5, -0.5]).unwrap(),
            },
            Layer::BatchNorm(crate::norm::BatchNormLayer::new(2, crate::norm::NormKind::l2())),
        ]);
        let default_stats = layer_weight_std(&model, PerturbScope::default()).unwrap();
        assert_eq!(default_stats.len(), 1);
        let all = PerturbScope {
            biases: true,
            bn_params: true,
        };
        let all_stats = layer_weight_std(&model, all).unwrap();
        let paths: Vec<&str> = all_stats.iter().map(|s| s.path.as_str()).collect();
        assert_eq!(
            paths,
            vec!["layer0.weight", "layer0.bias", "layer1.gamma", "layer1.beta"]
        );
    }

    #[test]
    fn eta_zero_is_identical_copy() {
        let model = dense_model(vec![0.25, -0.75, 1.5, 2.0], 2, 2);
        let mut rng = SeededRng::new(1);
        let copy = inject_noise(&model, 0.0, PerturbScope::default(), &mut rng).unwrap();
        for path in model.param_paths() {
            assert_eq!(model.param(path), copy.param(path));
        }
    }

    #[test]
    fn constant_tensor_receives_no_noise() {
        let model = dense_model(vec![3.0; 4], 2, 2);
        let mut rng = SeededRng::new(1);
        let copy = inject_noise(&model, 0.5, PerturbScope::default(), &mut rng).unwrap();
        assert_eq!(
            model.param(ParamPath::new(0, ParamRole::Weight)),
            copy.param(ParamPath::new(0, ParamRole::Weight))
        );
    }

    #[test]
    fn perturbation_statistics_match_eta_sigma() {
        let n = 10_000usize;
        let mut init = SeededRng::new(99);
        let weights: Vec<f64> = (0..n).map(|_| init.normal(0.0, 2.0)).collect();
        let model = dense_model(weights, n, 1);
        let sigma_w = model
            .param(ParamPath::new(0, ParamRole::Weight))
            .unwrap()
            .population_std();
        let eta = 0.2;
        for seed in [0u64, 1, 2] {
            let mut rng = SeededRng::new(seed);
            let copy = inject_noise(&model, eta, PerturbScope::default(), &mut rng).unwrap();
            let before = model.param(ParamPath::new(0, ParamRole::Weight)).unwrap();
            let after = copy.param(ParamPath::new(0, ParamRole::Weight)).unwrap();
            let deltas: Vec<f64> = after
                .data()
                .iter()
                .zip(before.data())
                .map(|(a, b)| a - b)
                .collect();
            let delta_t = Tensor::from_vec(vec![n], deltas.clone()).unwrap();
            let target = eta * sigma_w;
            let mean = deltas.iter().sum::<f64>() / n as f64;
            assert!(
                (delta_t.population_std() - target).abs() <= 0.02 * target,
                "seed {seed}: std {} vs {target}",
                delta_t.population_std()
            );
            assert!(
                mean.abs() <= 4.0 * target / (n as f64).sqrt(),
                "seed {seed}: mean {mean}"
            );
        }
    }

    #[test]
    fn normalized_accuracy_cases() {
        assert_eq!(normalized_accuracy(0.45, 0.90).unwrap(), 0.5);
        assert_eq!(normalized_accuracy(0.7, 0.7).unwrap(), 1.0);
        assert_eq!(normalized_accuracy(0.0, 0.9).unwrap(), 0.0);
        assert!(matches!(
            normalized_accuracy(0.5, 0.0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn average_normalized_accuracy_cases() {
        let paper_row = [0.9994, 0.9945, 0.9670, 0.9135, 0.8185, 0.6855];
        let a_avr = average_normalized_accuracy(&paper_row).unwrap();
        assert!((a_avr - 0.8964).abs() < 5e-5, "{a_avr}");
        assert_eq!(average_normalized_accuracy(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!((average_normalized_accuracy(&[0.2, 0.4]).unwrap() - 0.3).abs() < 1e-15);
        assert!(average_normalized_accuracy(&[]).is_err());
    }

    #[test]
    fn config_normalizes_eta_schedule() {
        let cfg = NoiseSweepConfig::new(
            vec![0.2, 0.01, 0.2, 0.0],
            5,
            1,
            PerturbScope::default(),
        )
        .unwrap();
        assert_eq!(cfg.etas, vec![0.0, 0.01, 0.2]);
        assert!(NoiseSweepConfig::new(vec![-0.1], 5, 1, PerturbScope::default()).is_err());
        assert!(NoiseSweepConfig::new(vec![0.1], 0, 1, PerturbScope::default()).is_err());
    }
}
