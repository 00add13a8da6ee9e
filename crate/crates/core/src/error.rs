use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants are grouped by the kind of problem so callers (the CLI in
/// particular) can map them onto process exit codes with [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is too small to normalize")]
    DegenerateVector { norm: f64 },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("hard-negative weights requested for an empty negative set")]
    EmptyNegativeSet,

    #[error("no anchor in the batch has a positive partner")]
    NoPositivePairs,

    #[error("batch has {rows} rows; at least 2 are required")]
    BatchTooSmall { rows: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("finite-difference step must be positive and finite, got {0}")]
    InvalidStepSize(f64),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("index {index} out of range for dataset of {len} samples")]
    Index { index: usize, len: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("matrix is not symmetric: |a[{row}][{col}] - a[{col}][{row}]| = {diff:e}")]
    Symmetry { row: usize, col: usize, diff: f64 },

    #[error("eigen solver did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Coarse classification of [`Error`] values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Divergence,
    InsufficientData,
    Other,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidStepSize(_) | Error::Parse { .. } | Error::Io(_) => {
                ErrorKind::Config
            }
            Error::Divergence { .. } => ErrorKind::Divergence,
            Error::InsufficientData(_) | Error::NoPositivePairs | Error::DegenerateEmbedding(_) => {
                ErrorKind::InsufficientData
            }
            _ => ErrorKind::Other,
        }
    }
}
