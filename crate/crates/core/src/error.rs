use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("invalid tensor shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node `{node}`: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("non-finite value produced at node `{node}`")]
    NonFinite { node: String },
    #[error("function is non-finite when probing coordinate {coordinate}")]
    NonFiniteProbe { coordinate: usize },
    #[error("non-finite gradient for parameter `{param}`; step skipped")]
    NonFiniteGradient { param: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed dataset file at byte {offset}: {detail}")]
    Parse { offset: u64, detail: String },
    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("invalid record {record}: {detail}")]
    Validation { record: usize, detail: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Top-level error for model construction, training and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("training collapsed in epoch {epoch}: {skipped}/{steps} steps produced non-finite losses")]
    Collapse { epoch: usize, skipped: usize, steps: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
