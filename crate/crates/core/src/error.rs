use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GragError> = std::result::Result<T, E>;

/// Failures while decoding an NPY stream.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum NpyError {
    #[error("bad magic bytes (not an NPY file)")]
    BadMagic,
    #[error("unsupported NPY version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype descriptor {0:?} (expected '<f4' or '<f8')")]
    UnsupportedDtype(String),
    #[error("fortran_order arrays are not supported")]
    FortranOrder,
    #[error("dtype mismatch: file holds {found}, caller expected {expected}")]
    DtypeMismatch { expected: String, found: String },
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected trailing bytes after array data")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum GragError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("group range [{start}, {end}) is invalid for a sequence of {len} tokens")]
    Range {
        start: usize,
        end: usize,
        len: usize,
    },

    #[error("{path}: {source}")]
    Npy {
        path: PathBuf,
        #[source]
        source: NpyError,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("bundle {path}: {message}")]
    Bundle { path: PathBuf, message: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl GragError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GragError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        GragError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GragError::Io {
            path: path.into(),
            source,
        }
    }
}
