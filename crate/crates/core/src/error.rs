use std::path::PathBuf;

use crate::train::TrainingTrace;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("center of class {0} read before initialization")]
    UninitializedCenter(usize),
    #[error("class {class} has {available} samples, {required} required")]
    ClassTooSmall {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("band {band} has zero variance")]
    ZeroVariance { band: usize },
    #[error("training diverged at batch {batch}")]
    Diverged { batch: usize, trace: Box<TrainingTrace> },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("trailing data: expected {expected} bytes, found {actual}")]
    TrailingData { expected: usize, actual: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("dimensions overflow addressable size")]
    DimensionOverflow,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors raised by numeric blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::NonFinite(_))
    }
}
