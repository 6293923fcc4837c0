//! Crate-wide error type. Module-specific failures all funnel into [`Error`]
//! so CLI and library callers handle one type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected {expected}, got shape {got:?}")]
    InvalidShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for size {bound}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: empty input")]
    EmptyInput { op: &'static str },

    #[error("{op}: domain error, entry {index} is {value}")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op}: non-finite value {value} at entry {index}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{op}: {what}")]
    InvalidArgument { op: &'static str, what: String },

    #[error("alignment mixture at output step {step}: every source position is masked")]
    DegenerateAlignment { step: usize },

    #[error("alignment enumeration too large: {source_len}^{target_len} exceeds {max}")]
    EnumerationTooLarge {
        source_len: usize,
        target_len: usize,
        max: u64,
    },

    #[error("{path}:{line}: {what}")]
    Format {
        path: String,
        line: usize,
        what: String,
    },

    #[error("dataset is empty: {what}")]
    EmptyDataset { what: String },

    #[error("vocabulary: {what}")]
    Vocab { what: String },

    #[error("checkpoint: {what}")]
    Checkpoint { what: String },

    #[error(
        "architecture mismatch: checkpoint holds {stored}, requested {requested} \
         (pass the override flag to evaluate anyway)"
    )]
    ArchMismatch { stored: String, requested: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("config: {what}")]
    Config { what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
