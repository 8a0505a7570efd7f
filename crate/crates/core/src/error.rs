use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("phase ledger violation in cycle {cycle}: {group} parameters changed during the {phase} phase")]
    Ledger {
        cycle: usize,
        phase: &'static str,
        group: &'static str,
    },

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while loading a dataset manifest and its matrices.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("malformed manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("manifest declares no views")]
    EmptyViews,

    #[error("sample count mismatch for {what}: expected {expected}, found {found}")]
    CountMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("{file}: row {row} has {found} columns, expected {expected}")]
    Width {
        file: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("{file}: non-numeric cell {value:?} at row {row}, column {col}")]
    NonNumeric {
        file: PathBuf,
        row: usize,
        col: usize,
        value: String,
    },

    #[error("{file}: non-finite value at row {row}, column {col}")]
    NonFinite { file: PathBuf, row: usize, col: usize },

    #[error("{file}: label {label} at row {row} is outside 0..{class_count}")]
    Label {
        file: PathBuf,
        row: usize,
        label: String,
        class_count: usize,
    },

    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// Failures while reading a model checkpoint.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a CRNP checkpoint (bad magic header)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}
