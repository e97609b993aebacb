use std::path::PathBuf;

use glcn_tensor::TensorError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {what}: {reason}")]
    Format { what: String, reason: String },
    #[error("{0}")]
    SamplingExhausted(String),
    #[error("lesion placement failed: {0}")]
    Placement(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("{0}")]
    InvalidInput(String),
    #[error("all {trials} search trials failed: {errors}")]
    SearchFailed { trials: usize, errors: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(what: impl Into<String>, reason: impl ToString) -> Self {
        Error::Format {
            what: what.into(),
            reason: reason.to_string(),
        }
    }
}
