use std::path::PathBuf;

use thiserror::Error;

use crate::measures::MeasureId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),

    #[error("malformed JSON in {path}: {message}")]
    MalformedJson { path: PathBuf, message: String },

    #[error("invalid {field}: {message}")]
    InvariantViolation { field: String, message: String },

    #[error("record references unknown visualization {0:?}")]
    DanglingReference(String),

    #[error("malformed preference record on line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("need at least {needed} points, found {found}")]
    TooFewPoints { needed: usize, found: usize },

    #[error("class {0} has a single point; hypothesis margin needs a near hit")]
    ClassTooSmall(u32),

    #[error("within-class distances are all zero or absent; ABW is undefined")]
    DegenerateWithin,

    #[error("visualization {0:?} has no high-dimensional source")]
    MissingHighDim(String),

    #[error("feature {0} is missing")]
    MissingFeature(MeasureId),

    #[error("no trainable preferences")]
    NoTrainablePreferences,

    #[error("no features for visualization {0:?}")]
    UncoveredVisualization(String),

    #[error("every candidate feature is constant over the training visualizations")]
    NoActiveFeatures,

    #[error("no user has at least {0} trainable preferences")]
    EmptyResult(usize),

    #[error("need at least 3 users for a split, found {0}")]
    TooFewUsers(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invariant(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvariantViolation {
            field: field.into(),
            message: message.into(),
        }
    }
}
