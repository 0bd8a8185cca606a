use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("timestep {t} out of range [{min}, {max}]")]
    TimestepOutOfRange { t: usize, min: usize, max: usize },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("noise must be zero at the final reverse step (t = 1)")]
    NonzeroFinalNoise,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{what} of {size} is not a multiple of {multiple}")]
    Divisibility {
        what: String,
        size: usize,
        multiple: usize,
    },

    #[error("probe of size {probe_size} is too small: the response reaches the border (need at least {required})")]
    ProbeTooSmall { probe_size: usize, required: usize },

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error("too few samples: {0}")]
    TooFew(String),

    #[error("division by zero: {0}")]
    DivisionByZero(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("content hash mismatch: metadata says {expected}, payload hashes to {found}")]
    HashMismatch { expected: String, found: String },

    #[error("array {name:?}: expected dims {expected:?}, found {found:?}")]
    ArrayShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing array {0:?}")]
    MissingArray(String),

    #[error("malformed archive: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error("all {0} sweep rows failed")]
    SweepFailed(usize),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than by a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidRange(_)
                | Error::TimestepOutOfRange { .. }
                | Error::InvalidConfig(_)
                | Error::Divisibility { .. }
                | Error::Config(_)
                | Error::TooFew(_)
                | Error::DivisionByZero(_)
        )
    }
}
