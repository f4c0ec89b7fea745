use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// Explicit Riccati integration would need more substeps than allowed.
    #[error("explicit Riccati step needs {required} substeps (limit {limit}); use the split scheme")]
    StiffRiccati { required: usize, limit: usize },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("non-finite value at step {step} ({what})")]
    NonFinite { step: usize, what: &'static str },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("plot: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI, one per error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::InvalidArgument(_) => 2,
            Error::Io { .. } | Error::Plot(_) => 3,
            Error::NonFinite { .. } | Error::StiffRiccati { .. } | Error::Factorization(_) => 4,
            _ => 1,
        }
    }
}
