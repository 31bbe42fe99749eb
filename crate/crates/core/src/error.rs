use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument violates an operation's precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A metric is undefined for the given input (e.g. no visible joints).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Dataset loading or splitting failed.
    #[error("ingestion error{}: {message}", record.as_ref().map(|r| format!(" (record {r})")).unwrap_or_default())]
    Ingestion {
        message: String,
        record: Option<String>,
    },

    /// A checkpoint could not be read or does not match the running configuration.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged; the state was dumped to `dump`.
    #[error("non-finite loss at epoch {epoch}, step {step} (batch ids {batch_ids:?}); state dumped to {dump:?}")]
    NonFinite {
        epoch: usize,
        step: usize,
        batch_ids: Vec<String>,
        dump: Option<PathBuf>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("plot error: {0}")]
    Plot(String),

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn ingest(msg: impl Into<String>, record: Option<String>) -> Self {
        Error::Ingestion {
            message: msg.into(),
            record,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
