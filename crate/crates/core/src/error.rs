//! Crate-wide error type.

use std::io;
use std::path::PathBuf;

/// Errors produced by any stage of the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An I/O operation failed; `path` names the file involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// A text input could not be parsed. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// A configuration file or key set was rejected.
    #[error("config: {0}")]
    Config(String),

    /// A caller-supplied argument violated a documented precondition.
    #[error("{0}")]
    Invalid(String),

    /// A numeric value that must be finite was NaN or infinite.
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    /// A checkpoint blob was malformed or written by an unknown version.
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// A run directory is already claimed by another writer.
    #[error("run directory locked by {path} (remove the file if the owner is gone)")]
    Locked { path: PathBuf },

    /// A pipeline stage failed; wraps the underlying error with the stage name.
    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::Invalid(message.into())
    }

    /// Wraps `self` with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
