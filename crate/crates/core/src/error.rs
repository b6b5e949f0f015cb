use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?} ({context})")]
    ShapeMismatch {
        left: Vec<usize>,
        right: Vec<usize>,
        context: &'static str,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid axis {axis} for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tape error: {0}")]
    Tape(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("{path}: not found")]
    NotFound { path: PathBuf },

    #[error("unsupported image: {0}")]
    UnsupportedImage(String),

    #[error("image decode failed: {0}")]
    Decode(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(left: &[usize], right: &[usize], context: &'static str) -> Self {
        Error::ShapeMismatch {
            left: left.to_vec(),
            right: right.to_vec(),
            context,
        }
    }

    pub(crate) fn invalid_shape(shape: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape {
            shape: shape.to_vec(),
            reason: reason.into(),
        }
    }
}
