//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes. The CLI maps each class to a distinct exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Model,
    Internal,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Model => "model",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Model => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing column `{column}`")]
    MissingColumn { column: String },

    #[error("row {row}: column `{column}`: {message}")]
    Row {
        row: usize,
        column: String,
        message: String,
    },

    #[error("file contains no data rows: {}", path.display())]
    EmptyFile { path: PathBuf },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient samples for entity {entity}: required {required}, available {available}")]
    InsufficientSamples {
        entity: usize,
        required: usize,
        available: usize,
    },

    #[error("entity {entity} would be left with an empty training set")]
    EmptyTrainSet { entity: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite feature value at index {index}")]
    NonFinite { index: usize },

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("model kind mismatch: {0}")]
    ModelMismatch(String),

    #[error("batch schedule exhausted for entity {entity} at round {round}")]
    ScheduleExhausted { entity: usize, round: usize },

    #[error("unsupported document version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("malformed {what} at line {line}: {message}")]
    Malformed {
        what: &'static str,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingColumn { .. }
            | Error::Row { .. }
            | Error::EmptyFile { .. }
            | Error::InsufficientSamples { .. }
            | Error::EmptyTrainSet { .. }
            | Error::Csv(_)
            | Error::Json(_)
            | Error::Malformed { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::Config(_) | Error::InvalidArgument(_) => ErrorClass::Config,
            Error::DimensionMismatch { .. }
            | Error::NonFinite { .. }
            | Error::EmptyValidation
            | Error::ModelMismatch(_)
            | Error::Version { .. } => ErrorClass::Model,
            Error::ScheduleExhausted { .. } => ErrorClass::Internal,
        }
    }
}
