//! Error taxonomy shared across the crate.
//!
//! Configuration problems (bad dimensions, unknown names, invalid parameters)
//! are kept distinct from numeric failures (non-finite states, overflow) and
//! from domain violations (a field or transform evaluated outside its
//! admissible set), because callers react differently: configuration errors
//! abort a run before any work, numeric errors carry the failing step for
//! diagnostics, and domain violations may merely exclude a path or a point.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: wrong dimensions, bad parameters, malformed input.
    #[error("configuration error: {0}")]
    Config(String),

    /// A validation contract was violated at runtime (e.g. a jump intensity
    /// outside (0, 1] at a candidate time).
    #[error("validation error: {0}")]
    Validation(String),

    /// No built-in model with the requested name.
    #[error("unknown model `{0}`")]
    UnknownModel(String),

    /// Non-finite or overflowing arithmetic; `step` locates the failure.
    #[error("numeric failure at step {step}: {message}")]
    Numeric { step: usize, message: String },

    /// A field, transform, or coefficient was evaluated outside its domain.
    #[error("domain violation at t = {t}, x = {x:?}: {message}")]
    Domain { t: f64, x: Vec<f64>, message: String },

    /// f'(v) vanished where the transformed system requires dividing by it.
    #[error("degenerate transform: f'(v) = 0 at t = {t}, x = {x:?}")]
    DegenerateTransform { t: f64, x: Vec<f64> },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serialize(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True when the error should exclude a single path or point from an
    /// aggregate rather than abort the whole computation.
    pub fn is_exclusion(&self) -> bool {
        matches!(
            self,
            Error::Domain { .. } | Error::DegenerateTransform { .. }
        )
    }
}
