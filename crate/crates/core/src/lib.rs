//! Training and evaluation toolkit for studying how the BatchNorm variance
//! statistic affects a model's resistance to weight noise.
//!
//! The crate provides three interchangeable BatchNorm variants (L2, L1, TopK),
//! a small trainable model zoo (MLP and CNN) with plain SGD, a noise harness
//! that injects proportional Gaussian noise into trained weights and reports
//! normalized-accuracy metrics, and an empirical estimator for SGD gradient
//! noise.
//!
//! Everything is deterministic: every random draw comes from a seeded,
//! stream-splittable generator, so sweeps produce identical results no matter
//! how many threads run them (enable the `parallel` feature for rayon-backed
//! execution; the sequential entry points always remain available).

pub mod data;
pub mod error;
pub mod gradnoise;
pub mod layers;
pub mod loss;
pub mod model;
pub mod noise;
pub mod norm;
pub mod report;
pub mod rng;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
