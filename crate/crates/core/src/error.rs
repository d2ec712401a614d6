use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures while reading or writing the binary file formats (MDST datasets
/// and MDMW checkpoints).
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },
    #[error("truncated payload while reading {context}")]
    Truncated { context: String },
    #[error("caption {caption} of image {image_id} is not valid UTF-8")]
    InvalidUtf8 { image_id: u64, caption: usize },
    #[error("{0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("invalid dataset: {0}")]
    Validation(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },
    #[error("singular linear system (condition estimate {condition:.3e})")]
    SingularSystem { condition: f64 },
    #[error("non-finite value in {path}")]
    NonFinite { path: String },
    #[error("over-contaminated split: no training window survives ({test} test windows drawn from {windows})")]
    OverContaminated { test: usize, windows: usize },
    #[error("no pairs available at offset k={k}")]
    EmptyPairs { k: usize },
    #[error("incomplete input, missing cells: {}", missing.join(", "))]
    Incomplete { missing: Vec<String> },
    #[error("format error in {path}: {source}", path = path.display())]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
    Incomplete,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } | Error::Json(_) => ErrorClass::Config,
            Error::Validation(_)
            | Error::DimensionMismatch { .. }
            | Error::Format { .. }
            | Error::Io(_)
            | Error::OverContaminated { .. }
            | Error::EmptyPairs { .. } => ErrorClass::Data,
            Error::Degenerate(_) | Error::SingularSystem { .. } | Error::NonFinite { .. } => {
                ErrorClass::Numeric
            }
            Error::Incomplete { .. } => ErrorClass::Incomplete,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn dims(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            found,
        }
    }
}
