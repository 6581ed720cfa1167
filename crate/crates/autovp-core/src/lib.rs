//! Visual prompting for frozen image classifiers.
//!
//! The pipeline adapts a frozen source classifier to a new labeled task
//! without touching its weights: target images are scaled into the center
//! of the source canvas, a trainable pixel frame fills the border, and the
//! source logits are translated to target classes by a label-mapping stage.
//! A configuration search enumerates the full design grid (initial scale,
//! trainable scale, backbone, mapping strategy) and prunes weak trials with
//! a successive-halving schedule before full training.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`prompting`] — frame mask geometry, differentiable input scaling, and
//!   the prompted-image composition.
//! - [`backbones`] — frozen single-encoder classifiers and dual image/text
//!   encoders, plus deterministic toy models for tests.
//! - [`label_mapping`] — frequency, random, iterative, semantic, and
//!   trainable linear output mappings.
//! - [`trainer`] — gradient training of prompt (and linear-map) parameters.
//! - [`tuner`] — grid enumeration and successive-halving trial scheduling.
//! - [`data`] — dataset manifests, subsampling, and synthetic tasks.
//! - [`analysis`] — confidence scores, prompt spectra, accuracy gains.

pub mod analysis;
pub mod autograd;
pub mod backbones;
pub mod data;
pub mod error;
pub mod label_mapping;
pub mod prompting;
pub mod trainer;
pub mod tuner;

pub use error::{Error, Result};
