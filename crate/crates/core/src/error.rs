use std::path::PathBuf;

use stb_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A configuration value is out of range or inconsistent.
    #[error("config `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// Input data violates a structural invariant.
    #[error("validation: {0}")]
    Validation(String),

    #[error("{path}: {location}: {msg}")]
    Parse {
        path: PathBuf,
        location: String,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sampling: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("non-finite activation in fusion layer {layer}, graph {graph}")]
    NonFiniteActivation { layer: usize, graph: usize },

    #[error("entropy: {0}")]
    Diagnostic(String),

    #[error("metric `{metric}`: {msg}")]
    Metric { metric: &'static str, msg: String },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, location: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            location: location.into(),
            msg: msg.into(),
        }
    }

    /// Errors caused by the caller's inputs rather than by a failed run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config { .. } | Error::Validation(_) | Error::Parse { .. } | Error::Sampling(_) => true,
            Error::Tensor(t) => matches!(t, TensorError::Config(_) | TensorError::Shape { .. }),
            _ => false,
        }
    }
}
