use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate sample at batch index {index}: {reason}")]
    DegenerateSample { index: usize, reason: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss {
        step: usize,
        value: f64,
        log: Box<crate::trainer::MetricsLog>,
    },

    #[error("gradient identity violated: {0}")]
    IdentityViolation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid record in {path}:{line}: {reason}")]
    Record { path: PathBuf, line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs or flags rather than by a failed
    /// computation. The CLI maps these to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Usage(_) | Error::Record { .. } | Error::Checkpoint(_)
        ) || matches!(self, Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound)
    }
}
