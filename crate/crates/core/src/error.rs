use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across data ingestion, model evaluation, and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion failed for {file}: {reason}")]
    Ingestion { file: PathBuf, reason: String },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Ingestion { .. } => "ingestion",
            Error::Structural(_) => "structural",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
            Error::Serde(_) => "serde",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
