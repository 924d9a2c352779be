use thiserror::Error;

/// Errors shared by the filtering, prediction and optimization layers.
#[derive(Debug, Clone, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The leading coefficient of the input-side polynomial dropped below the
    /// singularity guard while inverting the filter recursion. `step` is the
    /// 1-based sample index at which the recursion could not continue.
    #[error("singular leading filter coefficient at step {step} (|c0| = {gain:.3e})")]
    SingularLeadingCoefficient { step: usize, gain: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
