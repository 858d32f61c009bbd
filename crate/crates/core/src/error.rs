use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error(transparent)]
    Sparse(#[from] SparseFormatError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Errors raised while decoding MNIST IDX files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{images} holds {image_count} images but {labels} holds {label_count} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        image_count: usize,
        label_count: usize,
    },
    #[error("{path}: label {label} out of range 0..=9")]
    BadLabel { path: PathBuf, label: u8 },
}

/// Errors raised while decoding a sparse model file.
#[derive(Debug, Error)]
pub enum SparseFormatError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("truncated payload in tensor {tensor}: expected {expected} bytes, found {found}")]
    Truncated {
        tensor: usize,
        expected: usize,
        found: usize,
    },
    #[error("tensor {tensor}: index {index} does not follow {previous} (indices must strictly increase)")]
    NonMonotone {
        tensor: usize,
        previous: u64,
        index: u64,
    },
    #[error("tensor {tensor}: index {index} out of range for {len} elements")]
    IndexOutOfRange { tensor: usize, index: u64, len: usize },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
}
