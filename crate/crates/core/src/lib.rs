//! Time-varying linear-quadratic regulators solved by serial Riccati
//! recursion, by an endpoint-constrained variant, and by a time-parallel
//! splitting of the horizon into independent segments.

pub mod endpoint;
pub mod error;
pub mod generate;
pub mod kkt_oracle;
pub mod linalg;
pub mod lqr;
pub mod parallel;
pub mod riccati;
pub mod tolerance;

pub use error::{Result, SolverError};
pub use lqr::{AffinePolicy, LqrProblem, LqrSolution, Stage, StageCost, StageDynamics, TerminalCost};
pub use tolerance::ToleranceSet;
