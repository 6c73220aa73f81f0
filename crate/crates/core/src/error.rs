use thiserror::Error;

use crate::model::ValidationReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {}", .0.summary())]
    InvalidParams(ValidationReport),

    #[error("{mode} resonance not satisfied: mismatch {mismatch:.3e} exceeds {tolerance:.1e}")]
    ResonanceMismatch {
        mode: &'static str,
        mismatch: f64,
        tolerance: f64,
    },

    #[error(
        "closed-form rates assume equal pump amplitudes (alpha1 = {alpha1}, alpha2 = {alpha2}); \
         use coupling_matrices for the general case"
    )]
    UnequalAmplitudes { alpha1: f64, alpha2: f64 },

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("bad mode index {index} for a space with {modes} modes")]
    BadMode { index: usize, modes: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diagnostics exceeded: {0}")]
    Diagnostics(String),

    #[error("zero coupling: collective mode undefined")]
    ZeroCoupling,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
