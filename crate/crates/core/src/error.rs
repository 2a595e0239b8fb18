use std::path::PathBuf;

use thiserror::Error;

/// Failures decoding a tensor file. Each malformation has its own variant so
/// callers can tell a corrupted file from a foreign one.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("bad magic {found:?}, expected \"NST1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unknown dtype code {code}")]
    UnknownDtype { code: u8 },
    #[error("unsupported rank {ndim}, expected 1, 2 or 3")]
    BadRank { ndim: u8 },
    #[error("truncated at byte offset {offset}: expected {expected} bytes, found {found}")]
    Truncated { offset: u64, expected: u64, found: u64 },
    #[error("{extra} trailing bytes after payload ending at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("payload has {len} values but dims {dims:?} require {expected}")]
    ShapeMismatch { dims: Vec<usize>, len: usize, expected: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Tensor {
        path: PathBuf,
        #[source]
        source: TensorError,
    },
    #[error("invalid tensor: {0}")]
    TensorData(#[from] TensorError),
    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Coarse classification used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => ErrorKind::Config,
            Error::Numerical(_) => ErrorKind::Numerical,
            Error::Json { .. } => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
