use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TuneError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rollout diverged at step {step}")]
    Divergence { step: usize },

    #[error("sensitivity propagation overflowed at step {step}")]
    PropagationOverflow { step: usize },

    #[error("degenerate desired attitude (thrust direction norm {norm:e})")]
    DegenerateAttitude { norm: f64 },

    #[error("state estimator diverged at step {step}: innovation covariance is singular")]
    FilterDivergence { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TuneError {
    pub(crate) fn dim(what: &'static str, expected: usize, got: usize) -> Self {
        TuneError::Dimension {
            what,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TuneError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category name, used for CLI exit codes and failed comparison cells.
    pub fn category(&self) -> &'static str {
        match self {
            TuneError::Dimension { .. } | TuneError::NonFinite(_) | TuneError::InvalidArgument(_) => {
                "invalid-input"
            }
            TuneError::Divergence { .. }
            | TuneError::PropagationOverflow { .. }
            | TuneError::DegenerateAttitude { .. }
            | TuneError::FilterDivergence { .. } => "divergence",
            TuneError::Config(_) => "config",
            TuneError::Io { .. } => "io",
        }
    }
}
