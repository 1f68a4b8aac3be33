use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("attention row {row} of group {group} has no attendable key")]
    FullyMaskedRow { group: usize, row: usize },
    #[error("target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("index {index} out of range for {rows} rows")]
    IndexOutOfRange { index: usize, rows: usize },
    #[error("loss has no non-ignored targets")]
    NoTargets,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
