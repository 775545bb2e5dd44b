//! Trace-norm regularized low-rank optimization.
//!
//! Problems of the form `min_X f(X) + λ‖X‖_*` are solved by alternating a
//! second-order trust-region method on the manifold of fixed-rank matrices
//! `X = U B Vᵀ` with rank-one descent updates, until a duality-gap
//! certificate proves global optimality. A predictor-corrector scheme traces
//! whole regularization paths.
//!
//! ```
//! use tracenorm::{minimize, MatrixCompletion, ObservedEntries, SolverConfig};
//!
//! // Five observed entries of a 3×3 matrix, as (row, column, value).
//! let entries = vec![(0, 0, 1.0), (0, 2, 2.0), (1, 1, 0.5), (2, 0, 3.0), (2, 2, 6.0)];
//! let model = MatrixCompletion::new(ObservedEntries::new(3, 3, entries)?);
//! let sol = minimize(&model, 0.1, &SolverConfig::default(), None)?;
//! assert!(sol.certified());
//! println!("rank {}, objective {:.6}", sol.rank, sol.objective);
//! # Ok::<(), tracenorm::Error>(())
//! ```

pub mod error;
pub mod geometry;
pub mod linalg;
pub mod oracle;
pub mod problems;
pub mod regpath;
pub mod rng;
pub mod solver;
pub mod synth;
pub mod trustregion;

pub use error::{Error, Result};
pub use geometry::{FixedRankPoint, TangentVector, Triple};
pub use solver::{minimize, ConvexSolution, SolverConfig};
pub use regpath::{compute_path, PathConfig, PathResult};
pub use trustregion::{solve_fixed_rank, TrustRegionConfig};
pub use problems::{
    DualOperator, MatrixCompletion, MultivariateRegression, ObservedEntries, ProblemModel,
    RegressionData,
};



