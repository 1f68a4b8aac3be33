use std::path::PathBuf;

use nmt_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("MIDI parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("decode error at token {position}: {msg}")]
    Decode { position: usize, msg: String },
    #[error("alignment inconsistent with REMI encoding: {0}")]
    Alignment(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(PathBuf),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Runtime,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Data(_)
            | Error::Decode { .. }
            | Error::MissingCheckpoint(_)
            | Error::Json(_)
            | Error::Io { .. } => ErrorKind::Data,
            Error::Alignment(_) | Error::NonFiniteLoss { .. } | Error::Tensor(_) => ErrorKind::Runtime,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
