//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("attention denominator underflow (|den| < {eps:e}) at layer {layer}, head {head}, position {position}")]
    DenominatorUnderflow {
        layer: usize,
        head: usize,
        position: usize,
        eps: f64,
    },

    #[error("loss must be a scalar tensor, got shape {got}")]
    LossNotScalar { got: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} name: {name:?}")]
    UnknownName { kind: &'static str, name: String },

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("corpus is empty: {0}")]
    EmptyCorpus(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: usage/config problems are 1,
    /// numerical failures are 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. }
            | Error::DenominatorUnderflow { .. }
            | Error::NonFiniteLoss { .. } => 2,
            _ => 1,
        }
    }
}
