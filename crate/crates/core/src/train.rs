//! Mini-batch SGD training loop and accuracy evaluation.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::loss_softmax_ce;
use crate::model::SequentialModel;
use crate::rng::SeededRng;

/// Plain SGD hyperparameters. Training visits every sample once per epoch
/// in a freshly shuffled order derived from `shuffle_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
}

impl SgdConfig {
    /// `epochs = 0` is permitted and trains nothing; useful for emitting an
    /// initialized model.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::param(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::param("batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Trains the model in place. Deterministic given the model's initial state
/// and `cfg.shuffle_seed`; returns the per-epoch loss and train accuracy.
pub fn train(model: &mut SequentialModel, dataset: &Dataset, cfg: &SgdConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::degenerate("cannot train on an empty dataset"));
    }
    let n = dataset.len();
    let shuffle_root = SeededRng::new(cfg.shuffle_seed);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = shuffle_root.child(epoch as u64);
        for (i, slot) in order.iter_mut().enumerate() {
            *slot = i;
        }
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for batch_indices in order.chunks(cfg.batch_size) {
            let (x, labels) = dataset.gather(batch_indices);
            let (logits, caches) = model.forward_train(&x)?;
            let (loss, dlogits) = loss_softmax_ce(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let grads = model.backward(&caches, &dlogits)?;
            model.sgd_step(&grads, cfg.learning_rate)?;
            loss_sum += loss * batch_indices.len() as f64;
        }
        let accuracy = evaluate_accuracy(model, dataset)?;
        log.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n as f64,
            accuracy,
        });
    }
    Ok(log)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 256;

/// Fraction of samples whose argmax logit matches the label, evaluated in
/// inference mode. Chunked to bound the working set; per-sample outputs do
/// not depend on the chunking.
pub fn evaluate_accuracy(model: &SequentialModel, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::degenerate("cannot evaluate on an empty dataset"));
    }
    let n = dataset.len();
    let indices: Vec<usize> = (0..n).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, labels) = dataset.gather(chunk);
        let logits = model.forward_eval(&x)?;
        for (i, &label) in labels.iter().enumerate() {
            if argmax(logits.row(i)) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / n as f64)
}
