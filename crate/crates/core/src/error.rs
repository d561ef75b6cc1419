use std::path::PathBuf;

use thiserror::Error;

/// Failures raised by tensor operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension error: {msg}")]
    Shape { op: &'static str, msg: String },
    #[error("{op}: out of range: {msg}")]
    Range { op: &'static str, msg: String },
    #[error("{op}: invalid parameter: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape { op, msg: format!("incompatible shapes {lhs:?} and {rhs:?}") }
}

/// Failures reading or writing datasets and checkpoints.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated { what: String, expected: usize, actual: usize },
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint rejected: {0}")]
    Invalid(String),
    #[error("empty dataset: {0}")]
    Empty(String),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io { path: path.into(), source }
    }
}

/// Crate-level error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at epoch {epoch}, step {step} (k = {k}, lr = {lr:e})")]
    NonFiniteLoss { epoch: usize, step: u64, k: usize, lr: f64 },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
