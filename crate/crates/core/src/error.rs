use std::io;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step {t} is outside the valid range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("memory row {0} has already been written")]
    RowAlreadyWritten(usize),

    #[error("codebook is empty")]
    EmptyCodebook,

    #[error("need at least {needed} frames, got {available}")]
    InsufficientFrames { needed: usize, available: usize },

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("missing section `{0}`")]
    MissingSection(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            what,
            expected,
            actual,
        }
    }

    pub(crate) fn shape(what: &'static str, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            what,
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}
