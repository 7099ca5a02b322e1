//! Robust temporal feature magnitude learning for weakly-supervised video
//! anomaly detection over pre-computed snippet features.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a small reverse-mode graph.
//! - [`model`]: the multi-scale temporal network and the snippet classifier.
//! - [`losses`]: top-k magnitude separability, classifier and regulariser terms.
//! - [`trainer`]: mini-batch sampling, Adam with decoupled decay, the training loop.
//! - [`theorem_sim`]: Monte-Carlo study of expected separability versus `k`.
//! - [`data_io`]: synthetic data, feature/manifest/checkpoint formats.
//! - [`eval`]: AUC/AP, per-video scoring and hyperparameter sweeps.

pub mod data_io;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod theorem_sim;
pub mod trainer;

pub use error::{Error, Result};
