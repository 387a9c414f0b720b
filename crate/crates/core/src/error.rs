use std::path::PathBuf;

use thiserror::Error;

use crate::io::FormatError;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("need at least 2 snapshots to finalize, have {0}")]
    InsufficientSnapshots(u64),

    #[error("batch contains no labelled pixels")]
    EmptyBatch,

    #[error("unknown class index {class} (head has {classes} classes)")]
    UnknownClass { class: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numeric pipeline itself, as opposed to bad
    /// inputs, files or flags.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::NonFinite(_) | Error::InsufficientSnapshots(_) | Error::EmptyBatch
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
