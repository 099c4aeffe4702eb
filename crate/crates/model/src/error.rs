use std::path::PathBuf;

use simile_core::{LmError, SentimentError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("checkpoint is missing tensors: {0}")]
    MissingTensors(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("unsupported model type '{0}'")]
    UnsupportedModel(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("record {record}: {message}")]
    Record { record: String, message: String },
    #[error("loss diverged at epoch {epoch}, step {step}; restored the last good weights")]
    Diverged { epoch: usize, step: usize },
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Sentiment(#[from] SentimentError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ModelError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<ModelError> for LmError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Lm(e) => e,
            other => LmError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
