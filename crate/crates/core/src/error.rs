use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("undefined ratio at {context}: zero denominator")]
    UndefinedRatio { context: String },

    #[error("no stratum contains both groups at layer '{layer}'")]
    NoOverlap { layer: String },

    #[error("degenerate rate: {what} is zero")]
    DegenerateRate { what: String },

    #[error("degenerate variance: zero log variance with unequal ratios")]
    DegenerateVariance,

    #[error("covariate '{covariate}' has a NaN value for unit '{unit_id}'")]
    NanCovariate { covariate: String, unit_id: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at '{key}': {message}")]
    Config { key: String, message: String },

    #[error("configuration mismatch: {0}")]
    Mismatch(String),

    #[error("{0}")]
    Invalid(Violation),

    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("missing column '{0}'")]
    MissingColumn(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn undefined(context: impl Into<String>) -> Self {
        Error::UndefinedRatio {
            context: context.into(),
        }
    }
}
