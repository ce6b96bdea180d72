//! Partial domain adaptation with transferability-weighted adversarial training.
//!
//! The crate provides:
//!
//! - [`netcore`]: dense layers, activations, gradient reversal and a reverse-mode tape.
//! - [`model`]: feature extractor, classifier, domain discriminator and the
//!   leaky-softmax auxiliary predictor whose outputs become per-example weights.
//! - [`losses`]: the weighted classification, domain and auxiliary objectives.
//! - [`datagen`]: synthetic Gaussian-blob tasks and CSV ingestion.
//! - [`trainer`]: SGD-with-momentum minimax training for every variant.
//! - [`eval`]: accuracy, weight distributions, curves and report files.
//! - [`cli`]: the `etn` command-line front end.

pub mod cli;
pub mod datagen;
mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod netcore;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
