//! Online multivariate time-series forecasting under concept drift.
//!
//! The crate runs a round-based online loop: predict the next forecast
//! window, take one gradient step once the ground truth arrives, and monitor
//! the stream of per-round losses with a z-score detector. When the trailing
//! loss window drifts above the historical mean (or on a periodic schedule),
//! the forecaster is aggressively re-tuned on a small FIFO memory of recent
//! pairs, regularized by Gaussian-noise-augmented replays of older data so
//! the model does not forget the previous regime.
//!
//! Modules:
//! - [`stream`]: series representation, CSV ingestion, synthetic drifting
//!   streams, warm-up normalization, windowing, and the two evaluation
//!   protocols (standard and delayed feedback).
//! - [`forecaster`]: linear and one-hidden-layer forecasters with Adam
//!   updates and bit-exact checkpointing.
//! - [`detector`]: the loss-buffer z-score drift monitor.
//! - [`adapter`]: memory banks, variance-scaled Gaussian augmentation, and
//!   the full / regressor-only adaptation procedures.
//! - [`theory`]: exact linear-algebra verification of the covariance-gap
//!   analysis that motivates the augmentation (randomized theorem sweeps).
//! - [`harness`]: experiment orchestration, metrics, reports, and traces.
//!
//! The `drift-forge` binary exposes `run`, `suite`, `synth`, and
//! `verify-theory` subcommands over this library.

pub mod adapter;
pub mod detector;
pub mod forecaster;
pub mod harness;
pub mod stream;
pub mod theory;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration detected before any computation.
    #[error("config error: {0}")]
    Config(String),
    /// Malformed input data, with a 1-based line number where applicable.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// An argument or index outside its documented range.
    #[error("out of range: {0}")]
    Bounds(String),
    /// A numeric failure: non-finite value, singular matrix, failed solve.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// Report/trace/config (de)serialization failure.
    #[error("serialization error: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse { line, msg: format!("{other:?}") },
        }
    }
}
