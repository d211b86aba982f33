use std::path::PathBuf;

use gradkit::GradError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Grad(#[from] GradError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("unknown {what} `{name}` (known: {known})")]
    UnknownName {
        what: &'static str,
        name: String,
        known: String,
    },

    #[error("timestep {t} outside [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("condition {c} out of range for {classes} classes")]
    ConditionOutOfRange { c: usize, classes: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("external reward: {0}")]
    External(#[from] ExternalError),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures of the external JSON reward protocol. Each carries the raw
/// response text, when there was one.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExternalError {
    #[error("no response within {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },

    #[error("transport failure: {message}")]
    Transport { message: String },

    #[error("malformed response ({reason}): {raw}")]
    Malformed { reason: String, raw: String },

    #[error("request id mismatch: sent {sent}, got {received}: {raw}")]
    IdMismatch {
        sent: String,
        received: String,
        raw: String,
    },
}
