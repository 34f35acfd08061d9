//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch between operands of a tensor op.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An op produced or received a NaN/Inf value.
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },

    /// Generic invalid-argument error for tensor ops.
    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// Malformed scene file; carries the 1-based line number where parsing failed.
    #[error("scene file, line {line}: {msg}")]
    SceneFormat { line: usize, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Stage-two checkpoint refers to a different stage-one checkpoint.
    #[error("checkpoint pairing mismatch: expected stage-one id {expected}, found {found}")]
    CheckpointPairing { expected: String, found: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidOp {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
