use thiserror::Error;

/// Errors produced by the sampler library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numerical solve produced a non-finite value. Reports the first bad
    /// location (realization, time step, block).
    #[error("integration diverged at realization {realization}, step {step}, block {block}")]
    Divergence {
        realization: usize,
        step: usize,
        block: usize,
    },

    /// Inputs that are individually valid but mutually inconsistent
    /// (e.g. a patch committed against a cache it was not built from).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A matrix that must be symmetric positive definite is not.
    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    /// RK4 requested for a model with nonzero diffusion.
    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    /// A quadrature or iterative routine failed to reach its target accuracy.
    #[error("accuracy not reached: {0}")]
    Accuracy(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
