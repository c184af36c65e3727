use thiserror::Error;

/// Failures raised by the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A reduced control Hessian was not positive-definite at `stage`.
    #[error("Cholesky factorization failed at stage {stage}: control Hessian not positive-definite")]
    CholeskyFailure { stage: usize },

    /// A pivot block of a block-tridiagonal system could not be factored.
    #[error("factorization failed: singular pivot block {block}")]
    FactorizationFailure { block: usize },

    /// The endpoint constraint cannot be met. `residual` is the infinity norm
    /// of the unmet part of the feasibility triple.
    #[error("infeasible endpoint constraint (segment {segment}, residual {residual:.3e})")]
    Infeasible { segment: usize, residual: f64 },

    #[error("link-point system is singular at block {block}")]
    LinkSingular { block: usize },

    #[error("dense KKT system is singular")]
    SingularKkt,

    #[error("dense KKT system of dimension {dim} exceeds the size cap {cap}")]
    KktTooLarge { dim: usize, cap: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

pub type Result<T> = std::result::Result<T, SolverError>;
