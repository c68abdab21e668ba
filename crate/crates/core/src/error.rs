use thiserror::Error;

/// Errors raised by the simulation, control and identification layers.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `key` names the offending field.
    #[error("invalid value for `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("pressure {p} Pa outside the physical range [{lo}, {hi}] Pa")]
    OutOfRange { p: f64, lo: f64, hi: f64 },

    #[error("integration produced a non-finite pressure at t = {t} s")]
    NonFinite { t: f64 },

    #[error("spool map calibration failed: {0}")]
    Calibration(String),

    #[error("identification data rejected: {0}")]
    BadData(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("reference queried at t = {t} s beyond its duration {duration} s")]
    EndOfScenario { t: f64, duration: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
