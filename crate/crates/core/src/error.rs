use thiserror::Error;

/// Errors raised by the numerical kernels and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A matrix that must have full column rank (polar factor) or be
    /// invertible turned out numerically singular.
    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("matrix is not symmetric positive definite")]
    NotSpd,

    /// An iterative method did not reach its tolerance. The best iterate is
    /// kept so callers can still use it.
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence {
        iterations: usize,
        residual: f64,
        best: Box<crate::linalg::SingularTriplet>,
    },

    /// The rank-one step size underflowed without meeting sufficient decrease.
    #[error("degenerate rank-one update: step size underflow at beta = {beta:e}")]
    DegenerateUpdate { beta: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
