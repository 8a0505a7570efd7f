//! Cross-modal random network prediction (CRNP).
//!
//! A fixed random network and a smaller trainable predictor are attached to
//! the features of every modality. The predictor's fitting residual is low
//! where training features are dense and high where they are sparse, so it
//! serves as a feature-density uncertainty score. Each modality's features
//! are then re-weighted by the residuals of the *other* modalities before an
//! attention block fuses them and a decoder produces class (or per-pixel)
//! probabilities.
//!
//! Layout:
//! - [`tensor`]: dense tensors, reverse-mode tape, parameter arena, seeded RNG
//! - [`nn`]: dense/conv layers built on the tape
//! - [`rnp`]: random network prediction unit and uncertainty maps
//! - [`fusion`]: cross-modal weighting, fusion functions, attention
//! - [`model`]: the full network, ensembles, checkpoints
//! - [`train`]: optimizers, schedules, losses, alternating training
//! - [`data`]: manifests, splits, synthetic generators, OOD perturbation
//! - [`eval`]: metrics, OOD separation, density and randomized-prior studies
//! - [`experiment`]: run configuration, presets, ablation grid

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod rnp;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
