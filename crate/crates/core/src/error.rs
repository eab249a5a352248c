use std::path::PathBuf;

use thiserror::Error;

use crate::heads::LossBreakdown;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward called on a value that has no computation record")]
    NoRecord,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("checksum mismatch for {file}: expected {expected}, found {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("version mismatch: {0}")]
    Version(String),

    #[error(
        "symmetric eigen-solver did not converge on a {size}x{size} matrix \
         within {max_iterations} iterations (eps {eps:e})"
    )]
    EigenSolver {
        size: usize,
        max_iterations: usize,
        eps: f64,
    },

    #[error("concept heads out of sync with grouping: {0}")]
    Desync(String),

    #[error("non-finite loss at step {step} (epoch {epoch}): {breakdown:?}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        breakdown: LossBreakdown,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 3 for numerical failures, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::NonFiniteLoss { .. } | Error::EigenSolver { .. } => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
