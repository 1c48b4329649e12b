use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by callers that map errors onto exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient points: requested {requested}, available {available}")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate feature: row {row} has zero norm")]
    DegenerateFeature { row: usize },

    #[error("solver breakdown at iteration {iteration}: normal matrix is singular")]
    SolverBreakdown { iteration: usize },

    #[error("non-finite gradient in layer `{layer}`")]
    NonFiniteGradient { layer: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss is {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("malformed {what} at line {line}: {reason}")]
    Format {
        what: &'static str,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn format(what: &'static str, line: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            line,
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InsufficientPoints { .. }
            | Error::Empty(_)
            | Error::InvalidParameter { .. }
            | Error::ArchitectureMismatch(_)
            | Error::Format { .. } => ErrorClass::Validation,
            Error::NonFinite(_)
            | Error::DegenerateFeature { .. }
            | Error::SolverBreakdown { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Divergence { .. } => ErrorClass::Numerical,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}
