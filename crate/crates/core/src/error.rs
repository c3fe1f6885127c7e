use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in sample {batch}, channel {channel}")]
    NonFinite { batch: usize, channel: usize },

    #[error("need at least 2 spatial elements per channel, got {0}")]
    TooFewElements(usize),

    #[error("zero standard deviation in sample {batch}, channel {channel} (eps = 0)")]
    ZeroVariance { batch: usize, channel: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("cohort `{0}` has fewer than 2 samples")]
    SingletonCohort(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("non-finite value in `{tensor}`")]
    Numerical { tensor: String },

    #[error("training diverged at epoch {epoch}: non-finite `{tensor}`")]
    Diverged { epoch: usize, tensor: String },

    #[error("config error for key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("volume cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. } | Error::Diverged { .. })
    }
}
