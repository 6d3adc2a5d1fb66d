use std::path::PathBuf;

use qmix_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(#[from] FormatError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training failed: {0}")]
    Training(String),
}

/// Problems with on-disk checkpoints, sequences and CSV exports.
#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("malformed input: {0}")]
    Malformed(String),
    /// The checkpoint was written by a model with a different parameter set.
    #[error("parameter registry mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    RegistryMismatch { missing: Vec<String>, unexpected: Vec<String> },
    #[error("tensor {name} has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Shape(m) => Error::Shape(m),
            TensorError::Usage(m) => Error::Usage(m),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
