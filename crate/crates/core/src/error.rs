use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a mathematical precondition (shape, sign, range).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value is invalid or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A persisted artifact carries a schema or config version this build does not read.
    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Lifecycle misuse, e.g. running task t > 0 without task t-1 states.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("task {task}: {source}")]
    Task {
        task: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors a command line front-end should report as usage/config problems.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) => true,
            Error::Task { source, .. } => source.is_config(),
            _ => false,
        }
    }
}
