use std::path::PathBuf;

/// Error type shared by the whole crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("ingestion error: {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },
    #[error("codec error: {0}")]
    Codec(String),
    #[error("environment error: {0}")]
    Environment(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Short machine-parsable class for CLI error reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Ingestion { .. } => "ingestion",
            Error::Codec(_) => "codec",
            Error::Environment(_) => "environment",
            Error::InsufficientSamples(_) => "insufficient-samples",
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFinite(_) => "non-finite",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
