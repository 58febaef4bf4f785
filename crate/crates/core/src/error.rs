use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("factor {factor} has an empty label column")]
    EmptyFactor { factor: usize },

    #[error("entry {index} must be positive, got {value}")]
    NonPositive { index: usize, value: f64 },

    #[error("zero fill-in incomplete Cholesky broke down at row {row} (pivot {pivot})")]
    ZicBreakdown { row: usize, pivot: f64 },

    #[error("conjugate gradient breakdown at iteration {iteration}: curvature {curvature}")]
    CgBreakdown { iteration: usize, curvature: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("Newton mode finding did not converge after {iterations} iterations (last relative change {last_change})")]
    ModeNotConverged { iterations: usize, last_change: f64 },

    #[error("line search failed after {halvings} step halvings")]
    LineSearchFailed { halvings: usize },

    #[error("dense oracle capped at dimension {cap}, requested {requested}")]
    CapExceeded { cap: usize, requested: usize },

    #[error("matrix is not positive definite (pivot {pivot} at {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("operation not supported: {0}")]
    Unsupported(String),
}
