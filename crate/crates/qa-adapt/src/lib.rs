//! Cross-dataset adaptation toolkit for multiple-choice visual question
//! answering over precomputed feature vectors.
//!
//! The pieces, bottom up:
//!
//! - [`features`]: word-embedding tables, averaged text features,
//!   precomputed image features, question types.
//! - [`nn`]: a small dense-MLP core with exact backprop and Adam.
//! - [`dataset`] / [`synth`]: the triplet dataset model, ingestion and
//!   filtering, and a synthetic biased-pair generator with known shifts.
//! - [`scorer`]: the multiple-choice scorer `score(image, question,
//!   candidate)` and its partial-information variants.
//! - [`probe`]: the dataset-origin classifier quantifying cross-dataset
//!   bias per component.
//! - [`adapt`]: residual feature transforms trained adversarially against
//!   a domain discriminator, plus the CORAL affine baseline.
//! - [`eval`]: accuracy metrics and the direct/adapted/within comparison
//!   protocol with report emission.
//! - [`cli`]: the `qa-adapt` command-line entry point.
//!
//! Every run is deterministic given its seed. See the `examples/`
//! directory for one runnable walkthrough per capability.

pub mod adapt;
pub mod cli;
pub mod dataset;
mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod probe;
pub mod scorer;
pub mod synth;

pub use error::{Error, Result};
