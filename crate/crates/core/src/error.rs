use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulation and learning stack.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or model-definition document is malformed or
    /// violates a model invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Input data (CSV streams, datasets, model files) is malformed.
    #[error("data error: {0}")]
    Data(String),

    /// An iterative procedure did not reach its tolerance in budget.
    #[error("convergence failure: {what} (residual {residual:.3e})")]
    Convergence { what: String, residual: f64 },

    #[error("singular mass matrix at q = {0:?}")]
    SingularMassMatrix(Vec<f64>),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used for CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Convergence,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::SingularMassMatrix(_) => ErrorKind::Config,
            Error::Data(_) | Error::Dimension { .. } => ErrorKind::Data,
            Error::Convergence { .. } | Error::NonFiniteLoss { .. } => ErrorKind::Convergence,
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
