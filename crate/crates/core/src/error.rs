//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on a dimension an operation requires to match.
    #[error("{op}: dimension mismatch on axis {axis}: {left} vs {right}")]
    DimMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },

    /// A tensor has the wrong rank or an otherwise unusable shape.
    #[error("{op}: bad shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },

    #[error("{op}: embedding row {row} has zero norm")]
    ZeroNormRow { op: &'static str, row: usize },

    #[error("label {label} at position {index} out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("{op}: batch of size {n} too small (need at least {min})")]
    BatchTooSmall {
        op: &'static str,
        n: usize,
        min: usize,
    },

    #[error("{op}: state is in eval mode and must not be mutated")]
    EvalModeMutation { op: &'static str },

    #[error("non-finite values detected in '{name}'")]
    NonFinite { name: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint blob checksum mismatch: manifest {expected}, blob {got}")]
    ChecksumMismatch { expected: String, got: String },

    #[error("checkpoint format version {found} unsupported (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
