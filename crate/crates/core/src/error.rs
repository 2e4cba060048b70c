use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric failure: {what} did not converge after {iterations} iterations")]
    NotConverged { what: &'static str, iterations: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("no cost entry for layer `{layer_id}` at ranks ({r1}, {r2})")]
    CostResolution {
        layer_id: String,
        r1: usize,
        r2: usize,
    },
    #[error("invalid state: {0}")]
    State(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/validation, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) => 1,
            Error::NotConverged { .. } | Error::Numeric(_) => 3,
            Error::Shape(_)
            | Error::CostResolution { .. }
            | Error::State(_)
            | Error::Parse { .. }
            | Error::Data(_)
            | Error::Io { .. } => 2,
        }
    }
}
