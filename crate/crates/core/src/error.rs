//! Error type shared by every module.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite {name} at t = {t}")]
    NonFinite { name: &'static str, t: f64 },

    #[error("negative radicand {value:e} in rebased schedule at t = {t}")]
    NegativeRadicand { t: f64, value: f64 },

    #[error("singular: {0}")]
    Singular(String),

    #[error("quadrature did not converge: {0}")]
    Precision(String),

    #[error("marginal density {value:e} underflows at t = {t}; use the window bound for far-tail points")]
    Underflow { t: f64, value: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("integration produced a non-finite state at step {step}")]
    Integration { step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
