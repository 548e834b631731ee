use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value outside the domain of a transform (e.g. log of a non-positive number).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in `{field}`: {reason}")]
    Parse { field: String, reason: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("degenerate normalization scale: init cost {init} <= oracle cost {oracle}")]
    DegenerateScale { init: f64, oracle: f64 },

    #[error("worker protocol violation: {reason} (line: {line:?})")]
    Protocol { reason: String, line: String },

    #[error("worker failure: {0}")]
    Worker(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
