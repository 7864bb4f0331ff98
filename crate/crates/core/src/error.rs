use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OftError>;

#[derive(Debug, Error)]
pub enum OftError {
    #[error("{op}: dimension mismatch (expected {expected}, found {found})")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("invalid shape {rows}x{cols}: {reason}")]
    InvalidShape {
        rows: usize,
        cols: usize,
        reason: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is singular to working precision (pivot {pivot} at row {row})")]
    Singular { row: usize, pivot: f64 },

    #[error("neuron {column} has norm {norm:e}, below the zero-norm threshold")]
    ZeroNormNeuron { column: usize, norm: f64 },

    #[error("neurons {i} and {j} are within {distance:e} of each other on the unit sphere")]
    DegeneratePair { i: usize, j: usize, distance: f64 },

    #[error("dimension {d} is not divisible by block count {r}; divisors of {d}: {divisors:?}")]
    IndivisibleBlocks {
        d: usize,
        r: usize,
        divisors: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("operation requires a coft adapter, found mode `{0}`")]
    NotCoft(&'static str),

    #[error("non-finite loss at step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("training diverged at step {step}: loss {loss:e}")]
    Divergence { step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checksum mismatch or truncated file")]
    Checksum,

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("corrupt adapter file: {0}")]
    Corrupt(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl OftError {
    pub(crate) fn dims(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        OftError::DimensionMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OftError::Io {
            path: path.into(),
            source,
        }
    }
}
