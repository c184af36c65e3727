//! Serial Riccati recursion for the unconstrained-endpoint problem.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::lqr::{rollout, AffinePolicy, LqrProblem, LqrSolution, Stage, TerminalCost};

/// Cost-to-go `½ xᵀVxx x + vx1ᵀx + c` in the state only.
#[derive(Debug, Clone, PartialEq)]
pub struct PlainValueFunction {
    pub vxx: DMatrix<f64>,
    pub vx1: DVector<f64>,
    /// Constant offset, so the value predicts the exact remaining cost.
    pub c: f64,
}

impl PlainValueFunction {
    pub fn from_terminal(terminal: &TerminalCost) -> Self {
        Self {
            vxx: terminal.qxx.clone(),
            vx1: terminal.qx1.clone(),
            c: 0.0,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.vxx * x)) + self.vx1.dot(x) + self.c
    }

    /// Multiplier of the initial-state constraint for a tail starting at `x`:
    /// `λ = −(Vxx x + vx1)`.
    pub fn multiplier(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.vxx * x + &self.vx1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SerialBackward {
    /// `T` policies with `kz = 0`.
    pub policies: Vec<AffinePolicy>,
    /// `T + 1` value functions; the last is the terminal cost.
    pub values: Vec<PlainValueFunction>,
}

/// Backward pass over `stages` from a terminal value function. Stage indices in
/// errors are offset by `first_stage`.
pub fn backward_pass_stages(
    stages: &[Stage],
    terminal: PlainValueFunction,
    first_stage: usize,
) -> Result<SerialBackward> {
    let horizon = stages.len();
    let mut values = Vec::with_capacity(horizon + 1);
    let mut policies = Vec::with_capacity(horizon);
    values.push(terminal);
    for (t, st) in stages.iter().enumerate().rev() {
        let next = values.last().expect("non-empty");
        let (c, d) = (&st.cost, &st.dynamics);
        let v_fx = &next.vxx * &d.fx;
        let v_fu = &next.vxx * &d.fu;
        let g = &next.vx1 + &next.vxx * &d.f1;
        let mxx = &c.qxx + d.fx.tr_mul(&v_fx);
        let mux = &c.qux + d.fu.tr_mul(&v_fx);
        let muu = &c.quu + d.fu.tr_mul(&v_fu);
        let mx1 = &c.qx1 + d.fx.tr_mul(&g);
        let mu1 = &c.qu1 + d.fu.tr_mul(&g);
        let m0 = next.c + 0.5 * d.f1.dot(&(&next.vxx * &d.f1)) + next.vx1.dot(&d.f1);

        let chol = muu
            .cholesky()
            .ok_or(SolverError::CholeskyFailure { stage: first_stage + t })?;
        let kx = -chol.solve(&mux);
        let k1 = -chol.solve(&mu1);

        let mut vxx = mxx + mux.tr_mul(&kx);
        vxx = (&vxx + vxx.transpose()) * 0.5;
        let vx1 = mx1 + mux.tr_mul(&k1);
        let cst = m0 + 0.5 * mu1.dot(&k1);
        values.push(PlainValueFunction { vxx, vx1, c: cst });
        policies.push(AffinePolicy::state_feedback(kx, k1));
    }
    values.reverse();
    policies.reverse();
    Ok(SerialBackward { policies, values })
}

pub fn backward_pass(problem: &LqrProblem) -> Result<SerialBackward> {
    backward_pass_stages(
        problem.stages(),
        PlainValueFunction::from_terminal(problem.terminal()),
        0,
    )
}

/// Solves the problem by one backward and one forward sweep.
pub fn solve(problem: &LqrProblem) -> Result<LqrSolution> {
    let bw = backward_pass(problem)?;
    let (states, controls) = rollout(problem, &bw.policies, problem.x_init())?;
    let lambdas = states
        .iter()
        .zip(&bw.values)
        .map(|(x, v)| v.multiplier(x))
        .collect();
    LqrSolution::assemble(problem, states, controls, lambdas, bw.policies)
}
