//! Error type shared by all core modules.

use thiserror::Error;

/// Errors produced by prompt geometry, backbones, mapping, data and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid prompt geometry: {0}")]
    Geometry(String),

    #[error("scale {scale} outside [{min}, {max}]")]
    ScaleOutOfRange { scale: f64, min: f64, max: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("mapping infeasible: {sources} source classes cannot supply {m} per target for {targets} targets ({m}*{targets} needed)")]
    MappingInfeasible {
        sources: usize,
        targets: usize,
        m: usize,
    },

    #[error("SemanticMap requires a vision backbone with an explicit source label set; {backbone} is a dual encoder")]
    SemanticMapOnDualEncoder { backbone: String },

    #[error("vision backbone {backbone} declares no source class names; SemanticMap unavailable")]
    MissingSourceNames { backbone: String },

    #[error("weight initialization (I|0) is defined only for dual-encoder backbones; {backbone} is a vision model")]
    WeightInitOnVisionBackbone { backbone: String },

    #[error("cannot tokenize class name {name:?}: {reason}")]
    Tokenizer { name: String, reason: String },

    #[error("empty class list")]
    EmptyClassList,

    #[error("dataset split is empty: {0}")]
    EmptySplit(String),

    #[error("manifest {path}:{line}: {msg}")]
    Manifest {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("subsample fraction {fraction} invalid for class {class:?} with {available} samples")]
    SubsampleInfeasible {
        fraction: f64,
        class: String,
        available: usize,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch} ({config})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        config: String,
    },

    #[error("no completed tuning trials to select from")]
    NoCompletedTrials,

    #[error("unknown backbone {0:?}")]
    UnknownBackbone(String),

    #[error("backbone weight file unavailable: {0}")]
    WeightsUnavailable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
