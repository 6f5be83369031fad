use thiserror::Error;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::nn::ModelError;
use crate::optim::OptimError;
use crate::persist::PersistError;
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("{0}")]
    Config(String),
    #[error("checkpoint expects windows of length {checkpoint}, data uses {requested}")]
    WindowMismatch { checkpoint: usize, requested: usize },
    #[error("{0}")]
    CheckFailed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl Error {
    /// Short category used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Data(_) => "data",
            Error::Model(_) => "model",
            Error::Optim(_) => "optimizer",
            Error::Metrics(_) => "metrics",
            Error::Train(TrainError::NonFiniteLoss { .. }) => "diverged",
            Error::Train(_) => "train",
            Error::Persist(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::WindowMismatch { .. } => "window-mismatch",
            Error::CheckFailed(_) => "check-failed",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
