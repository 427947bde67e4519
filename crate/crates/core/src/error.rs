use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid label {label} at pixel {index} (num_classes = {num_classes})")]
    InvalidLabel {
        label: u8,
        index: usize,
        num_classes: usize,
    },

    #[error("probabilities not normalized at pixel {index}: sum = {sum}")]
    Unnormalized { index: usize, sum: f64 },

    #[error("non-finite value in {tensor} at element {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("training diverged at step {step}: {trace}")]
    Diverged { step: u64, trace: String },

    #[error("no class has a nonzero denominator; metric is undefined")]
    EmptyMetric,

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    MagicMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported version {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated at byte offset {offset}: expected {expected} bytes, file has {actual}")]
    Truncated {
        path: PathBuf,
        offset: u64,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: malformed file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/validation, 3 I/O/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidDimension(_)
            | Error::InvalidArgument(_)
            | Error::ShapeMismatch(_)
            | Error::InvalidLabel { .. }
            | Error::Config(_) => 2,
            Error::MagicMismatch { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Format { .. }
            | Error::Io { .. } => 3,
            Error::Unnormalized { .. } | Error::NonFinite { .. } | Error::Diverged { .. } | Error::EmptyMetric => 4,
        }
    }
}
