//! Crate-wide error type.
//!
//! Variants are grouped so the CLI can map them onto its stable exit codes:
//! configuration problems, numeric failures (non-finite loss), and checkpoint
//! format violations each get their own variant family.

use crate::losses::LossReport;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}: {report:?}")]
    NonFiniteLoss { step: u64, report: LossReport },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("l2_normalize: row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("{op}: row {row} is not unit-norm (norm {norm})")]
    NotUnitNorm {
        op: &'static str,
        row: usize,
        norm: f32,
    },

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("{path}: {msg} at byte offset {offset}")]
    BadRecord {
        path: String,
        msg: String,
        offset: u64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}
