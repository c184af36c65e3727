//! Dense reference solver: the full KKT system as one saddle-point matrix.
//!
//! Variables are ordered `x_0, u_0, x_1, u_1, …, u_{T-1}, x_T`, followed by the
//! multipliers `λ_0, …, λ_T` and, with a terminal constraint, `μ_T`:
//!
//! ```text
//! [ H  Cᵀ ] [ w ]   [ −g ]
//! [ C  0  ] [ ν ] = [  d ]
//! ```
//!
//! with `H`, `g` the stacked cost and `C w = d` the initial, dynamics and
//! terminal constraints.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::lqr::{kkt_residual, kkt_residual_with_endpoint, LqrProblem, LqrSolution};

/// Systems above this dimension are refused unless the cap is overridden.
pub const DEFAULT_SIZE_CAP: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KktLayout {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub terminal_constraint: bool,
}

impl KktLayout {
    pub fn primal_dim(&self) -> usize {
        self.horizon * (self.n + self.m) + self.n
    }

    pub fn dim(&self) -> usize {
        self.primal_dim() + (self.horizon + 1) * self.n + if self.terminal_constraint { self.n } else { 0 }
    }

    pub fn x(&self, t: usize) -> usize {
        t * (self.n + self.m)
    }

    pub fn u(&self, t: usize) -> usize {
        t * (self.n + self.m) + self.n
    }

    pub fn lambda(&self, t: usize) -> usize {
        self.primal_dim() + t * self.n
    }

    pub fn mu(&self) -> Option<usize> {
        self.terminal_constraint
            .then(|| self.primal_dim() + (self.horizon + 1) * self.n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktSystem {
    pub matrix: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub layout: KktLayout,
}

impl KktSystem {
    pub fn residual(&self, w: &DVector<f64>) -> f64 {
        (&self.matrix * w - &self.rhs).amax()
    }
}

fn put(a: &mut DMatrix<f64>, r: usize, c: usize, b: &DMatrix<f64>) {
    a.view_mut((r, c), b.shape()).copy_from(b);
}

/// Builds the saddle-point system; `x_term` adds the row `x_T = x_term`.
pub fn assemble(problem: &LqrProblem, x_term: Option<&DVector<f64>>) -> KktSystem {
    let n = problem.state_dim();
    let horizon = problem.horizon();
    let layout = KktLayout {
        n,
        m: problem.control_dim(),
        horizon,
        terminal_constraint: x_term.is_some(),
    };
    let dim = layout.dim();
    let mut a = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);
    let eye = DMatrix::<f64>::identity(n, n);

    for (t, st) in problem.stages().iter().enumerate() {
        let (c, d) = (&st.cost, &st.dynamics);
        let (xi, ui) = (layout.x(t), layout.u(t));
        put(&mut a, xi, xi, &c.qxx);
        put(&mut a, xi, ui, &c.qux.transpose());
        put(&mut a, ui, xi, &c.qux);
        put(&mut a, ui, ui, &c.quu);
        b.rows_mut(xi, n).copy_from(&(-&c.qx1));
        b.rows_mut(ui, layout.m).copy_from(&(-&c.qu1));

        // λ_{t+1} couples x_t, u_t and x_{t+1}.
        let li = layout.lambda(t + 1);
        let xn = layout.x(t + 1);
        let fxn = -&d.fx;
        let fun = -&d.fu;
        put(&mut a, li, xi, &fxn);
        put(&mut a, li, ui, &fun);
        put(&mut a, li, xn, &eye);
        put(&mut a, xi, li, &fxn.transpose());
        put(&mut a, ui, li, &fun.transpose());
        put(&mut a, xn, li, &eye);
        b.rows_mut(li, n).copy_from(&d.f1);
    }
    let term = problem.terminal();
    let xt = layout.x(horizon);
    put(&mut a, xt, xt, &term.qxx);
    b.rows_mut(xt, n).copy_from(&(-&term.qx1));

    let l0 = layout.lambda(0);
    put(&mut a, l0, 0, &eye);
    put(&mut a, 0, l0, &eye);
    b.rows_mut(l0, n).copy_from(problem.x_init());

    if let (Some(mi), Some(z)) = (layout.mu(), x_term) {
        put(&mut a, mi, xt, &eye);
        put(&mut a, xt, mi, &eye);
        b.rows_mut(mi, n).copy_from(z);
    }
    KktSystem { matrix: a, rhs: b, layout }
}

/// Oracle output: the unpacked solution plus the terminal multiplier, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSolution {
    pub solution: LqrSolution,
    pub mu: Option<DVector<f64>>,
    /// ∞-norm residual of the solve in the assembled system.
    pub system_residual: f64,
}

pub fn solve_dense(problem: &LqrProblem, x_term: Option<&DVector<f64>>) -> Result<DenseSolution> {
    solve_dense_with_cap(problem, x_term, DEFAULT_SIZE_CAP)
}

/// Dense LU solve with partial pivoting, refusing systems larger than `cap`.
pub fn solve_dense_with_cap(
    problem: &LqrProblem,
    x_term: Option<&DVector<f64>>,
    cap: usize,
) -> Result<DenseSolution> {
    let n = problem.state_dim();
    if x_term.is_some_and(|z| z.len() != n) {
        return Err(SolverError::DimensionMismatch("x_term has the wrong length".into()));
    }
    let probe = KktLayout {
        n,
        m: problem.control_dim(),
        horizon: problem.horizon(),
        terminal_constraint: x_term.is_some(),
    };
    if probe.dim() > cap {
        return Err(SolverError::KktTooLarge { dim: probe.dim(), cap });
    }
    let sys = assemble(problem, x_term);
    let lu = sys.matrix.clone().lu();
    let diag = lu.u().diagonal();
    let max = diag.amax();
    let min = diag.iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
    if !(max > 0.0 && min > 1e-13 * max) {
        return Err(SolverError::SingularKkt);
    }
    let w = lu.solve(&sys.rhs).ok_or(SolverError::SingularKkt)?;
    let lay = sys.layout;
    let states: Vec<_> = (0..=lay.horizon)
        .map(|t| w.rows(lay.x(t), n).into_owned())
        .collect();
    let controls: Vec<_> = (0..lay.horizon)
        .map(|t| w.rows(lay.u(t), lay.m).into_owned())
        .collect();
    let lambdas = (0..=lay.horizon)
        .map(|t| w.rows(lay.lambda(t), n).into_owned())
        .collect();
    let mu = lay.mu().map(|i| w.rows(i, n).into_owned());
    let objective = crate::lqr::evaluate_objective(problem, &states, &controls)?;
    let mut solution = LqrSolution {
        states,
        controls,
        lambdas,
        policies: Vec::new(),
        objective,
        kkt_residual_inf: 0.0,
    };
    solution.kkt_residual_inf = match (&mu, x_term) {
        (Some(mu), Some(z)) => kkt_residual_with_endpoint(problem, &solution, mu, z),
        _ => kkt_residual(problem, &solution),
    };
    Ok(DenseSolution {
        solution,
        mu,
        system_residual: sys.residual(&w),
    })
}
