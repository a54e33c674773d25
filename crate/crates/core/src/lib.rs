//! Conditional-independence representation learning toolkit.
//!
//! Trains small CNN encoders under an equalized-odds conditional-independence
//! constraint enforced by a pair of adversarial discriminators, using dynamic
//! within-batch resampling of latent vectors. Ships a synthetic Gaussian-kernel
//! image benchmark, fairness metrics (balanced accuracy, squared distance
//! correlation, equalized-odds gap, McNemar), and an experiment harness with a
//! CLI front end.

pub mod autodiff;
pub mod ci_engine;
pub mod container;
pub mod error;
pub mod fairmetrics;
pub mod harness;
pub mod kernels;
pub mod nets;
pub mod synthgen;

pub use error::{Error, Result};
