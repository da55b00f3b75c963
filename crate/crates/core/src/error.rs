//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Structural misuse: operand shapes or lengths do not line up.
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A value fell outside the mathematical domain of an operation.
    #[error("{op}: domain error: {detail}")]
    Domain { op: &'static str, detail: String },

    /// A NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// A file could not be read or did not parse; `offset` is the byte
    /// position of the problem.
    #[error("{}: {detail} (byte {offset})", path.display())]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    /// A configuration value was rejected before any computation ran.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }

    /// Wraps a file-open failure with the path it concerned.
    pub fn open(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            detail: format!("cannot open: {}", err),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
