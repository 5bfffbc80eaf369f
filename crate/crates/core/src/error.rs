use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The variants are coarse on purpose: the command-line front end maps each
/// one onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller passed malformed or out-of-range input.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A point left the domain of a map (for example the closed ball).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced NaN or infinity.
    #[error("numerical failure in {stage}: {detail}")]
    Numerical { stage: String, detail: String },

    /// Resolved configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// A binary container or manifest could not be parsed.
    #[error("format error in {}: {msg} (byte offset {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Manifest, answers or label data is inconsistent.
    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn numerical(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
