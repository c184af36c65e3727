use serde::{Deserialize, Serialize};

/// Numerical thresholds shared by every solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceSet {
    /// Relative singular-value cutoff for rank decisions (fraction of σ_max).
    pub rank_tol: f64,
    /// Endpoint feasibility threshold, scaled by `1 + ‖x_init‖ + ‖x_term‖`.
    pub feas_tol: f64,
    /// KKT residual threshold.
    pub kkt_tol: f64,
}

impl Default for ToleranceSet {
    fn default() -> Self {
        Self {
            rank_tol: 1e-10,
            feas_tol: 1e-8,
            kkt_tol: 1e-8,
        }
    }
}
