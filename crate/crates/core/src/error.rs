use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("parameter {name:?}: {reason}")]
    ParamMismatch { name: String, reason: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("missing embedding for {0:?}")]
    MissingEmbedding(String),
    #[error("training diverged at iteration {iter}: loss is {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
