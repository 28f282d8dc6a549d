use thiserror::Error;

/// Errors produced anywhere in the density-evolution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("pointwise covariance evaluation undefined for white noise")]
    PointwiseUndefined,

    #[error("covariance kernel does not decay below {threshold:e} within horizon {horizon}")]
    Divergence { horizon: f64, threshold: f64 },

    #[error("shape calibration failed: target {target} outside [{low_tau}, {high_tau}] (a in [{low_a}, {high_a}])")]
    Calibration {
        target: f64,
        low_a: f64,
        high_a: f64,
        low_tau: f64,
        high_tau: f64,
    },

    #[error("covariance matrix is not positive semidefinite after jitter {jitter:e}")]
    NotPsd { jitter: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("time {t} outside trajectory range [{lo}, {hi}]")]
    Domain { t: f64, lo: f64, hi: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("missing moment `{0}`")]
    MissingMoment(String),

    #[error("moment history does not cover [{from}, {to}]")]
    HistoryGap { from: f64, to: f64 },

    #[error("non-finite coefficient at x = {x:?}")]
    Assembly { x: Vec<f64> },

    #[error("linear solve stagnated after {iterations} iterations (relative residual {residual:e})")]
    Stagnation { iterations: usize, residual: f64 },

    #[error("closure iteration did not converge at t = {t} after {iterations} iterations (last delta {delta:e})")]
    NonConvergence { t: f64, iterations: usize, delta: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
