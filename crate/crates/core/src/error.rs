use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("matrix `{0}` is not positive definite")]
    NotPositiveDefinite(&'static str),

    /// The allocation leaves no feasible input sequence.
    #[error("allocation infeasible: coupling row {row} has theta = {value:e} < 0")]
    Infeasible { row: usize, value: f64 },

    #[error("active-set solver exceeded {0} working-set changes")]
    IterationLimit(usize),

    #[error("active constraint block is rank deficient: {0}")]
    DegeneratePiece(String),

    #[error("matrix is singular or ill-conditioned (condition estimate {cond:e})")]
    Singular { cond: f64 },

    #[error("probe set has {have} usable responses, at least {need} required")]
    TooFewProbes { have: usize, need: usize },

    #[error("closed loop aborted at step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{0}")]
    Report(String),
}

/// Coarse failure class, used for process exit codes and the C error codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Solver,
    Io,
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::Step {
            step,
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter { .. }
            | Error::DimensionMismatch { .. }
            | Error::NotPositiveDefinite(_)
            | Error::Config { .. } => ErrorCategory::Validation,
            Error::Infeasible { .. }
            | Error::IterationLimit(_)
            | Error::DegeneratePiece(_)
            | Error::Singular { .. }
            | Error::TooFewProbes { .. } => ErrorCategory::Solver,
            Error::Step { source, .. } => source.category(),
            Error::Io { .. } | Error::Csv { .. } | Error::Report(_) => ErrorCategory::Io,
        }
    }
}
