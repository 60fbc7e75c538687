use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the engine.
///
/// `Undefined` and `Degenerate` are not failures of the input data as such:
/// they mark statistics that do not exist for the sample at hand and are
/// reported distinctly from a zero value.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("{file}:{line}: {message}")]
    Data {
        file: String,
        line: u64,
        message: String,
    },

    #[error("insufficient data for {what}: have {have}, need {need}")]
    InsufficientData {
        what: String,
        have: usize,
        need: usize,
    },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("scenario {id}: {source}")]
    Scenario {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn insufficient(what: impl Into<String>, have: usize, need: usize) -> Self {
        Error::InsufficientData {
            what: what.into(),
            have,
            need,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable error code, used by the CLI error JSON.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::DataIntegrity(_) => "data_integrity",
            Error::Data { .. } => "data",
            Error::InsufficientData { .. } => "insufficient_data",
            Error::Undefined(_) => "undefined",
            Error::Degenerate(_) => "degenerate",
            Error::Infeasible(_) => "infeasible",
            Error::Config(_) => "config",
            Error::Scenario { .. } => "scenario",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
