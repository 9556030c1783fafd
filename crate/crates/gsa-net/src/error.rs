//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by tensor ops, model construction, training and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expectation) disagree on shape.
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// An input contained NaN or infinity where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// An index-style argument exceeded its bound.
    #[error("{name} = {value} out of bounds (max {max})")]
    Bounds {
        name: &'static str,
        value: usize,
        max: usize,
    },

    /// An operation over a set was handed an empty set.
    #[error("empty input for {0}")]
    EmptySet(&'static str),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid config: {0}")]
    Config(String),

    /// The training loss became non-finite at the given step.
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    /// Checkpoint file could not be parsed.
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
