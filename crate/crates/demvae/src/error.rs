//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter lies outside the family's feasible domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A vector or matrix dimension does not match what the operation expects.
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    /// Mixture block index out of range.
    #[error("block index {index} out of range ({blocks} blocks)")]
    BlockIndex { index: usize, blocks: usize },

    /// The operation is only defined for a subset of families.
    #[error("unsupported family: {0}")]
    UnsupportedFamily(&'static str),

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed input file; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A loss term became NaN or infinite during training.
    #[error("non-finite value in term `{term}`")]
    NonFinite { term: &'static str },

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
