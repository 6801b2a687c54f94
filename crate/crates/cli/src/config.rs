//! Experiment configuration: one JSON file describes the model, the data,
//! the SGD settings and the noise sweep, plus a master seed every random
//! stream derives from. A run is reproducible from its config alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bnkit::data::{load_idx, make_blobs, Dataset};
use bnkit::error::{Error, Result};
use bnkit::model::{build_cnn, build_mlp, SequentialModel};
use bnkit::noise::{NoiseSweepConfig, PerturbScope, DEFAULT_ETAS, DEFAULT_REPEATS};
use bnkit::norm::NormKind;
use bnkit::rng::SeededRng;
use bnkit::train::SgdConfig;

/// Child-stream indices off the master seed. Fixed so artifacts stay
/// reproducible across releases.
mod streams {
    pub const INIT: u64 = 0;
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const SWEEP: u64 = 4;
    pub const GRADNOISE: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelSpec {
    Mlp {
        hidden: Vec<usize>,
        norm: NormKind,
    },
    Cnn {
        channels: [usize; 2],
        kernel: usize,
        dense: usize,
        norm: NormKind,
    },
}

impl ModelSpec {
    pub fn norm(&self) -> NormKind {
        match self {
            ModelSpec::Mlp { norm, .. } | ModelSpec::Cnn { norm, .. } => *norm,
        }
    }

    fn validate(&self) -> Result<()> {
        self.norm().validate()?;
        match self {
            ModelSpec::Mlp { hidden, .. } => {
                if hidden.is_empty() || hidden.iter().any(|&w| w == 0) {
                    return Err(Error::config("mlp hidden widths must be positive"));
                }
            }
            ModelSpec::Cnn {
                channels,
                kernel,
                dense,
                ..
            } => {
                if channels.iter().any(|&c| c == 0) || *kernel == 0 || *dense == 0 {
                    return Err(Error::config("cnn extents must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs {
        train: usize,
        test: usize,
        classes: usize,
        spread: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        classes: Option<usize>,
    },
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        match self {
            DatasetSpec::Blobs {
                train,
                test,
                classes,
                spread,
            } => {
                if *classes < 1 {
                    return Err(Error::config("blobs classes must be >= 1"));
                }
                if *train < *classes || *test < *classes {
                    return Err(Error::config(
                        "blobs train/test sizes must cover every class",
                    ));
                }
                if !(*spread >= 0.0) {
                    return Err(Error::config("blobs spread must be >= 0"));
                }
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for path in [train_images, train_labels, test_images, test_labels] {
                    if !path.exists() {
                        return Err(Error::config(format!(
                            "dataset file does not exist: {}",
                            path.display()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    /// Derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_seed: Option<u64>,
    #[serde(default)]
    pub perturb_biases: bool,
    #[serde(default)]
    pub perturb_bn_params: bool,
}

fn default_gradnoise_trials() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradNoiseSection {
    #[serde(default = "default_gradnoise_trials")]
    pub trials: usize,
    /// Cap on the number of training samples used for per-sample
    /// gradients; the full set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

impl Default for GradNoiseSection {
    fn default() -> Self {
        GradNoiseSection {
            trials: default_gradnoise_trials(),
            samples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub sgd: SgdSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub gradnoise: GradNoiseSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.dataset.validate()?;
        self.resolved_sgd().validate()?;
        self.resolved_sweep()?;
        if self.gradnoise.trials < 1 {
            return Err(Error::config("gradnoise trials must be >= 1"));
        }
        Ok(())
    }

    fn master(&self) -> SeededRng {
        SeededRng::new(self.seed)
    }

    pub fn resolved_sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.sgd.learning_rate,
            batch_size: self.sgd.batch_size,
            epochs: self.sgd.epochs,
            shuffle_seed: self
                .sgd
                .shuffle_seed
                .unwrap_or_else(|| self.master().child(streams::SHUFFLE).seed()),
        }
    }

    pub fn resolved_sweep(&self) -> Result<NoiseSweepConfig> {
        NoiseSweepConfig::new(
            self.sweep.etas.clone().unwrap_or_else(|| DEFAULT_ETAS.to_vec()),
            self.sweep.repeats.unwrap_or(DEFAULT_REPEATS),
            self.sweep
                .base_seed
                .unwrap_or_else(|| self.master().child(streams::SWEEP).seed()),
            PerturbScope {
                biases: self.sweep.perturb_biases,
                bn_params: self.sweep.perturb_bn_params,
            },
        )
    }

    pub fn gradnoise_rng(&self) -> SeededRng {
        self.master().child(streams::GRADNOISE)
    }

    pub fn load_train_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs {
                train,
                classes,
                spread,
                ..
            } => {
                let mut rng = self.master().child(streams::TRAIN_DATA);
                make_blobs(&mut rng, *train, *classes, *spread)
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                classes,
                ..
            } => load_idx(train_images, train_labels, *classes),
        }
    }

    pub fn load_test_dataset(&self) -> Result<Dataset> {
        match &self.dataset {
            DatasetSpec::Blobs {
                test,
                classes,
                spread,
                ..
            } => {
                let mut rng = self.master().child(streams::TEST_DATA);
                make_blobs(&mut rng, *test, *classes, *spread)
            }
            DatasetSpec::Idx {
                test_images,
                test_labels,
                classes,
                ..
            } => load_idx(test_images, test_labels, *classes),
        }
    }

    /// Builds the configured architecture for the given data shape, seeded
    /// from the master seed.
    pub fn build_model(&self, dataset: &Dataset) -> Result<SequentialModel> {
        let mut init = self.master().child(streams::INIT);
        let classes = dataset.num_classes;
        match &self.model {
            ModelSpec::Mlp { hidden, norm } => Ok(build_mlp(
                &mut init,
                dataset.sample_len(),
                hidden,
                classes,
                *norm,
            )),
            ModelSpec::Cnn {
                channels,
                kernel,
                dense,
                norm,
            } => {
                let shape = dataset.inputs.shape();
                if shape.len() != 4 {
                    return Err(Error::config(format!(
                        "cnn needs image inputs (n, c, h, w), dataset has shape {shape:?}"
                    )));
                }
                build_cnn(
                    &mut init,
                    shape[1],
                    shape[2],
                    shape[3],
                    *channels,
                    *kernel,
                    *dense,
                    classes,
                    *norm,
                )
            }
        }
    }

    /// JSON value with the norm choice and output directory blanked out;
    /// two configs are sweep-comparable exactly when these agree.
    pub fn comparison_key(&self) -> Result<serde_json::Value> {
        let mut clone = self.clone();
        clone.out_dir = None;
        match &mut clone.model {
            ModelSpec::Mlp { norm, .. } | ModelSpec::Cnn { norm, .. } => {
                *norm = NormKind::l2();
            }
        }
        Ok(serde_json::to_value(&clone)?)
    }
}
