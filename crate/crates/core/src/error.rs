//! Error type shared by every module of the engine.

use std::path::PathBuf;

/// Errors raised by quantization, training, retrieval, evaluation and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("batch too small: {rows} rows, need at least 4 (two items with two views)")]
    BatchTooSmall { rows: usize },

    #[error("clipping exhausts negatives: eta = {eta} but only {negatives} negatives per query")]
    ClippingExhaustsNegatives { eta: usize, negatives: usize },

    #[error("non-finite gradient: {0}")]
    NonFiniteGradient(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("batch size {batch} larger than dataset of {items} items")]
    BatchLargerThanDataset { batch: usize, items: usize },

    #[error("empty database")]
    EmptyDatabase,

    #[error("empty ranking")]
    EmptyRanking,

    #[error("index {index} out of range for codebook of size {size}")]
    IndexOutOfRange { index: usize, size: usize },

    #[error("label vocabulary mismatch: {left} vs {right}")]
    VocabularyMismatch { left: usize, right: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("trailing bytes: expected {expected} bytes, found {found}")]
    TrailingBytes { expected: u64, found: u64 },

    #[error("checksum mismatch")]
    ChecksumMismatch,

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
