//! Shared error type for the toolkit.

use thiserror::Error;

use crate::exprdsl::DslError;

#[derive(Debug, Error)]
pub enum TubeError {
    /// A field or drift evaluator returned a non-finite value.
    #[error("field evaluation failure at t={t}, x={x:?}: {reason}")]
    FieldEval { t: f64, x: Vec<f64>, reason: String },

    /// The Gram matrix of a scaled frame is numerically singular.
    #[error("degenerate frame: Hörmander condition fails numerically at (t={t}, x={x:?})")]
    DegenerateFrame { t: f64, x: Vec<f64> },

    #[error("skeleton blow-up at t={t}")]
    SkeletonBlowUp { t: f64 },

    /// Argument outside its mathematical domain (radius, interval, index...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Dsl(#[from] DslError),

    #[error("optimizer stalled: {0}")]
    OptimizerStalled(String),

    #[error("outside contraction basin: |gamma| grew to {gamma_norm:.3e} (limit {limit:.3e})")]
    OutsideBasin { gamma_norm: f64, limit: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TubeError>;

impl TubeError {
    pub fn field_eval(t: f64, x: &[f64], reason: impl Into<String>) -> Self {
        TubeError::FieldEval {
            t,
            x: x.to_vec(),
            reason: reason.into(),
        }
    }

    pub fn degenerate(t: f64, x: &[f64]) -> Self {
        TubeError::DegenerateFrame { t, x: x.to_vec() }
    }
}
