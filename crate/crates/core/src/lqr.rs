//! Problem and solution data model shared by all solvers.
//!
//! A problem is a horizon of `T` stages, each with a quadratic cost
//!
//! ```text
//! cost_t(x, u) = ½ xᵀQxx x + uᵀQux x + ½ uᵀQuu u + qx1ᵀx + qu1ᵀu
//! ```
//!
//! and affine dynamics `x_{t+1} = Fx x_t + Fu u_t + f1`, closed by a terminal
//! cost `½ xᵀQxx_T x + qx1_Tᵀx` and the initial condition `x_0 = x_init`.
//!
//! Multipliers follow the sign convention of the stationarity conditions
//!
//! ```text
//! Qxx x_t + Quxᵀ u_t + qx1 + λ_t − Fxᵀ λ_{t+1} = 0
//! Qux x_t + Quu u_t + qu1 − Fuᵀ λ_{t+1}       = 0
//! Qxx_T x_T + qx1_T + λ_T                      = 0
//! ```

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};

/// Relative asymmetry allowed in the symmetric cost blocks before validation
/// flags them.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Eigenvalue floor (relative to the spectral norm) for PSD checks.
pub const PSD_FLOOR: f64 = 1e-9;

fn symmetrize(a: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let scale = a.amax();
    let asym = (a - a.transpose()).amax();
    let rel = if scale > 0.0 { asym / scale } else { 0.0 };
    ((a + a.transpose()) * 0.5, rel)
}

fn check_shape(what: &str, a: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if a.nrows() != rows || a.ncols() != cols {
        return Err(SolverError::DimensionMismatch(format!(
            "{what}: expected {rows}x{cols}, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

fn check_len(what: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(SolverError::DimensionMismatch(format!(
            "{what}: expected length {len}, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// Quadratic stage cost. `qxx` and `quu` are symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    pub qxx: DMatrix<f64>,
    pub qux: DMatrix<f64>,
    pub quu: DMatrix<f64>,
    pub qx1: DVector<f64>,
    pub qu1: DVector<f64>,
    asymmetry: f64,
}

impl StageCost {
    pub fn new(
        qxx: DMatrix<f64>,
        qux: DMatrix<f64>,
        quu: DMatrix<f64>,
        qx1: DVector<f64>,
        qu1: DVector<f64>,
    ) -> Result<Self> {
        let n = qxx.nrows();
        let m = quu.nrows();
        check_shape("Qxx", &qxx, n, n)?;
        check_shape("Quu", &quu, m, m)?;
        check_shape("Qux", &qux, m, n)?;
        check_len("qx1", &qx1, n)?;
        check_len("qu1", &qu1, m)?;
        let (qxx, ax) = symmetrize(&qxx);
        let (quu, au) = symmetrize(&quu);
        Ok(Self {
            qxx,
            qux,
            quu,
            qx1,
            qu1,
            asymmetry: ax.max(au),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.qxx.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.quu.nrows()
    }

    /// Largest relative asymmetry of `Qxx`/`Quu` as they were given.
    pub fn input_asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.qxx * x))
            + u.dot(&(&self.qux * x))
            + 0.5 * u.dot(&(&self.quu * u))
            + self.qx1.dot(x)
            + self.qu1.dot(u)
    }
}

/// Quadratic terminal cost. `qxx` is symmetrized on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub qxx: DMatrix<f64>,
    pub qx1: DVector<f64>,
    asymmetry: f64,
}

impl TerminalCost {
    pub fn new(qxx: DMatrix<f64>, qx1: DVector<f64>) -> Result<Self> {
        let n = qxx.nrows();
        check_shape("Qxx_T", &qxx, n, n)?;
        check_len("qx1_T", &qx1, n)?;
        let (qxx, asymmetry) = symmetrize(&qxx);
        Ok(Self {
            qxx,
            qx1,
            asymmetry,
        })
    }

    pub fn zero(n: usize) -> Self {
        Self {
            qxx: DMatrix::zeros(n, n),
            qx1: DVector::zeros(n),
            asymmetry: 0.0,
        }
    }

    pub fn input_asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.qxx * x)) + self.qx1.dot(x)
    }
}

/// Affine dynamics `x' = Fx x + Fu u + f1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDynamics {
    pub fx: DMatrix<f64>,
    pub fu: DMatrix<f64>,
    pub f1: DVector<f64>,
}

impl StageDynamics {
    pub fn new(fx: DMatrix<f64>, fu: DMatrix<f64>, f1: DVector<f64>) -> Result<Self> {
        let n = fx.nrows();
        check_shape("Fx", &fx, n, n)?;
        check_shape("Fu", &fu, n, fu.ncols())?;
        check_len("f1", &f1, n)?;
        Ok(Self { fx, fu, f1 })
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.fx * x + &self.fu * u + &self.f1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub cost: StageCost,
    pub dynamics: StageDynamics,
}

/// Feedback law `u = Kx x + Kz x_term + k1`.
///
/// Policies attached to an [`LqrSolution`] are in state-feedback form: any
/// endpoint dependence has been folded into `k1` and `kz` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinePolicy {
    pub kx: DMatrix<f64>,
    pub kz: DMatrix<f64>,
    pub k1: DVector<f64>,
}

impl AffinePolicy {
    pub fn state_feedback(kx: DMatrix<f64>, k1: DVector<f64>) -> Self {
        let (m, n) = kx.shape();
        Self {
            kx,
            kz: DMatrix::zeros(m, n),
            k1,
        }
    }

    pub fn zero(n: usize, m: usize) -> Self {
        Self::state_feedback(DMatrix::zeros(m, n), DVector::zeros(m))
    }

    /// Substitutes a concrete endpoint, returning a state-feedback policy.
    pub fn fold(&self, x_term: &DVector<f64>) -> Self {
        Self::state_feedback(self.kx.clone(), &self.k1 + &self.kz * x_term)
    }

    /// `Kx x + k1`; the endpoint term is assumed folded.
    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.kx * x + &self.k1
    }

    pub fn control_with_endpoint(&self, x: &DVector<f64>, x_term: &DVector<f64>) -> DVector<f64> {
        &self.kx * x + &self.kz * x_term + &self.k1
    }
}

/// Full time-varying LQR problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrProblem {
    n: usize,
    m: usize,
    stages: Vec<Stage>,
    terminal: TerminalCost,
    x_init: DVector<f64>,
}

impl LqrProblem {
    pub fn new(stages: Vec<Stage>, terminal: TerminalCost, x_init: DVector<f64>) -> Result<Self> {
        let n = x_init.len();
        let first = stages.first().ok_or_else(|| {
            SolverError::DimensionMismatch("horizon must contain at least one stage".into())
        })?;
        let m = first.cost.control_dim();
        if n == 0 || m == 0 {
            return Err(SolverError::DimensionMismatch(
                "state and control dimensions must be positive".into(),
            ));
        }
        for (t, st) in stages.iter().enumerate() {
            let c = &st.cost;
            let d = &st.dynamics;
            if c.state_dim() != n
                || c.control_dim() != m
                || d.fx.nrows() != n
                || d.fu.ncols() != m
            {
                return Err(SolverError::DimensionMismatch(format!(
                    "stage {t} dimensions differ from (n, m) = ({n}, {m})"
                )));
            }
        }
        if terminal.qxx.nrows() != n {
            return Err(SolverError::DimensionMismatch(format!(
                "terminal cost is {0}x{0}, expected {n}x{n}",
                terminal.qxx.nrows()
            )));
        }
        Ok(Self {
            n,
            m,
            stages,
            terminal,
            x_init,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    /// Number of controls `T`.
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn terminal(&self) -> &TerminalCost {
        &self.terminal
    }

    pub fn x_init(&self) -> &DVector<f64> {
        &self.x_init
    }

    pub fn with_x_init(&self, x_init: DVector<f64>) -> Result<Self> {
        check_len("x_init", &x_init, self.n)?;
        let mut p = self.clone();
        p.x_init = x_init;
        Ok(p)
    }

    /// Largest absolute entry over all problem data.
    pub fn data_magnitude(&self) -> f64 {
        let mut mag = self.x_init.amax().max(self.terminal.qxx.amax()).max(self.terminal.qx1.amax());
        for st in &self.stages {
            let c = &st.cost;
            let d = &st.dynamics;
            mag = mag
                .max(c.qxx.amax())
                .max(c.qux.amax())
                .max(c.quu.amax())
                .max(c.qx1.amax())
                .max(c.qu1.amax())
                .max(d.fx.amax())
                .max(d.fu.amax())
                .max(d.f1.amax());
        }
        mag
    }
}

/// Numeric solution of an LQR problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub lambdas: Vec<DVector<f64>>,
    pub policies: Vec<AffinePolicy>,
    pub objective: f64,
    pub kkt_residual_inf: f64,
}

impl LqrSolution {
    /// Assembles a solution, evaluating its objective and KKT residual.
    pub fn assemble(
        problem: &LqrProblem,
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
        lambdas: Vec<DVector<f64>>,
        policies: Vec<AffinePolicy>,
    ) -> Result<Self> {
        let objective = evaluate_objective(problem, &states, &controls)?;
        let mut sol = Self {
            states,
            controls,
            lambdas,
            policies,
            objective,
            kkt_residual_inf: 0.0,
        };
        sol.kkt_residual_inf = kkt_residual(problem, &sol);
        Ok(sol)
    }

    /// Largest ∞-norm deviation of states and controls from `other`.
    pub fn primal_deviation(&self, other: &LqrSolution) -> f64 {
        max_deviation(&self.states, &other.states).max(max_deviation(&self.controls, &other.controls))
    }

    pub fn lambda_deviation(&self, other: &LqrSolution) -> f64 {
        max_deviation(&self.lambdas, &other.lambdas)
    }
}

/// Largest entrywise difference between two equally long vector sequences;
/// infinite when the lengths or dimensions differ.
pub fn max_deviation(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.len() != y.len() {
                f64::INFINITY
            } else {
                (x - y).amax()
            }
        })
        .fold(0.0, f64::max)
}

/// A single violated invariant found by [`validate`].
#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    NonFinite { stage: Option<usize>, field: &'static str },
    Asymmetric { stage: Option<usize>, field: &'static str, relative: f64 },
    QuuNotPositiveDefinite { stage: usize },
    SchurNotPsd { stage: usize, min_eigenvalue: f64 },
    TerminalNotPsd { min_eigenvalue: f64 },
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let at = |s: &Option<usize>| match s {
            Some(t) => format!("stage {t}"),
            None => "terminal".to_string(),
        };
        match self {
            Self::NonFinite { stage, field } => {
                write!(f, "non-finite entry in {field} at {}", at(stage))
            }
            Self::Asymmetric { stage, field, relative } => write!(
                f,
                "asymmetry exceeds tolerance: {field} at {} (relative {relative:.3e})",
                at(stage)
            ),
            Self::QuuNotPositiveDefinite { stage } => {
                write!(f, "Quu not positive-definite at stage {stage}")
            }
            Self::SchurNotPsd { stage, min_eigenvalue } => write!(
                f,
                "Qxx - Qux^T Quu^-1 Qux not positive semi-definite at stage {stage} (min eigenvalue {min_eigenvalue:.3e})"
            ),
            Self::TerminalNotPsd { min_eigenvalue } => write!(
                f,
                "Qxx_T not positive semi-definite (min eigenvalue {min_eigenvalue:.3e})"
            ),
        }
    }
}

/// Outcome of [`validate`]; empty means the problem is strictly convex.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "ok");
        }
        for (i, issue) in self.issues.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

fn min_max_eigen(a: &DMatrix<f64>) -> (f64, f64) {
    let eig = a.clone().symmetric_eigenvalues();
    let min = eig.min();
    let norm = eig.amax();
    (min, norm)
}

fn all_finite_mat(a: &DMatrix<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn all_finite_vec(a: &DVector<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Checks the convexity and well-formedness assumptions of every stage.
/// Never aborts: every violated invariant is reported.
pub fn validate(problem: &LqrProblem) -> ValidationReport {
    let mut issues = Vec::new();
    for (t, st) in problem.stages.iter().enumerate() {
        let c = &st.cost;
        let d = &st.dynamics;
        let stage = Some(t);
        let mats: [(&'static str, &DMatrix<f64>); 5] = [
            ("Qxx", &c.qxx),
            ("Qux", &c.qux),
            ("Quu", &c.quu),
            ("Fx", &d.fx),
            ("Fu", &d.fu),
        ];
        let mut finite = true;
        for (field, a) in mats {
            if !all_finite_mat(a) {
                issues.push(ValidationIssue::NonFinite { stage, field });
                finite = false;
            }
        }
        for (field, v) in [("qx1", &c.qx1), ("qu1", &c.qu1), ("f1", &d.f1)] {
            if !all_finite_vec(v) {
                issues.push(ValidationIssue::NonFinite { stage, field });
                finite = false;
            }
        }
        if !finite {
            continue;
        }
        if c.asymmetry > SYMMETRY_TOL {
            issues.push(ValidationIssue::Asymmetric {
                stage,
                field: "Qxx/Quu",
                relative: c.asymmetry,
            });
        }
        let Some(chol) = c.quu.clone().cholesky() else {
            issues.push(ValidationIssue::QuuNotPositiveDefinite { stage: t });
            continue;
        };
        let schur = &c.qxx - c.qux.transpose() * chol.solve(&c.qux);
        let (min, _) = min_max_eigen(&schur);
        let (_, qxx_norm) = min_max_eigen(&c.qxx);
        if min < -PSD_FLOOR * qxx_norm.max(f64::MIN_POSITIVE) {
            issues.push(ValidationIssue::SchurNotPsd {
                stage: t,
                min_eigenvalue: min,
            });
        }
    }
    let term = &problem.terminal;
    if !all_finite_mat(&term.qxx) || !all_finite_vec(&term.qx1) {
        issues.push(ValidationIssue::NonFinite {
            stage: None,
            field: "terminal",
        });
    } else {
        if term.asymmetry > SYMMETRY_TOL {
            issues.push(ValidationIssue::Asymmetric {
                stage: None,
                field: "Qxx_T",
                relative: term.asymmetry,
            });
        }
        let (min, norm) = min_max_eigen(&term.qxx);
        if min < -PSD_FLOOR * norm.max(f64::MIN_POSITIVE) {
            issues.push(ValidationIssue::TerminalNotPsd { min_eigenvalue: min });
        }
    }
    if !all_finite_vec(&problem.x_init) {
        issues.push(ValidationIssue::NonFinite {
            stage: None,
            field: "x_init",
        });
    }
    ValidationReport { issues }
}

fn check_policies(problem: &LqrProblem, policies: &[AffinePolicy], x0: &DVector<f64>) -> Result<()> {
    if policies.len() != problem.horizon() {
        return Err(SolverError::DimensionMismatch(format!(
            "expected {} policies, got {}",
            problem.horizon(),
            policies.len()
        )));
    }
    check_len("x0", x0, problem.n)?;
    for (t, p) in policies.iter().enumerate() {
        if p.kx.shape() != (problem.m, problem.n) || p.k1.len() != problem.m {
            return Err(SolverError::DimensionMismatch(format!(
                "policy {t} does not map R^{} to R^{}",
                problem.n, problem.m
            )));
        }
    }
    Ok(())
}

/// Closed-loop simulation of state-feedback `policies` from `x0`.
pub fn rollout(
    problem: &LqrProblem,
    policies: &[AffinePolicy],
    x0: &DVector<f64>,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    rollout_with(problem, policies, x0, |st, x, u| st.dynamics.step(x, u))
}

/// Like [`rollout`] with caller-supplied transition `step(stage, x_t, u_t)`.
pub fn rollout_with<F>(
    problem: &LqrProblem,
    policies: &[AffinePolicy],
    x0: &DVector<f64>,
    mut step: F,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)>
where
    F: FnMut(&Stage, &DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    check_policies(problem, policies, x0)?;
    let mut states = Vec::with_capacity(policies.len() + 1);
    let mut controls = Vec::with_capacity(policies.len());
    states.push(x0.clone());
    for (st, pol) in problem.stages.iter().zip(policies) {
        let x = states.last().expect("non-empty");
        let u = pol.control(x);
        let next = step(st, x, &u);
        controls.push(u);
        states.push(next);
    }
    Ok((states, controls))
}

fn check_trajectory(problem: &LqrProblem, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<()> {
    let t = problem.horizon();
    if states.len() != t + 1 || controls.len() != t {
        return Err(SolverError::DimensionMismatch(format!(
            "trajectory has {} states and {} controls, expected {} and {t}",
            states.len(),
            controls.len(),
            t + 1
        )));
    }
    for x in states {
        check_len("state", x, problem.n)?;
    }
    for u in controls {
        check_len("control", u, problem.m)?;
    }
    Ok(())
}

/// Per-stage cost terms `cost_0, …, cost_{T-1}, cost_T`.
pub fn cost_terms(problem: &LqrProblem, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<Vec<f64>> {
    check_trajectory(problem, states, controls)?;
    let mut terms: Vec<f64> = problem
        .stages
        .iter()
        .zip(states.iter().zip(controls))
        .map(|(st, (x, u))| st.cost.eval(x, u))
        .collect();
    terms.push(problem.terminal.eval(&states[problem.horizon()]));
    Ok(terms)
}

/// Total cost `cost_T(x_T) + Σ cost_t(x_t, u_t)`.
pub fn evaluate_objective(problem: &LqrProblem, states: &[DVector<f64>], controls: &[DVector<f64>]) -> Result<f64> {
    Ok(cost_terms(problem, states, controls)?.iter().sum())
}

/// ∞-norm of the stationarity and primal residuals at `solution`.
/// Mis-sized solutions yield `f64::INFINITY`.
pub fn kkt_residual(problem: &LqrProblem, solution: &LqrSolution) -> f64 {
    kkt_residual_impl(problem, solution, None)
}

/// KKT residual of the endpoint-constrained problem with `x_T = x_term` and
/// terminal multiplier `mu`: the terminal stationarity row gains `+μ` and the
/// primal residual includes `x_T − x_term`.
pub fn kkt_residual_with_endpoint(
    problem: &LqrProblem,
    solution: &LqrSolution,
    mu: &DVector<f64>,
    x_term: &DVector<f64>,
) -> f64 {
    if mu.len() != problem.n || x_term.len() != problem.n {
        return f64::INFINITY;
    }
    kkt_residual_impl(problem, solution, Some((mu, x_term)))
}

fn kkt_residual_impl(
    problem: &LqrProblem,
    solution: &LqrSolution,
    endpoint: Option<(&DVector<f64>, &DVector<f64>)>,
) -> f64 {
    let t_len = problem.horizon();
    let (xs, us, ls) = (&solution.states, &solution.controls, &solution.lambdas);
    if check_trajectory(problem, xs, us).is_err()
        || ls.len() != t_len + 1
        || ls.iter().any(|l| l.len() != problem.n)
    {
        return f64::INFINITY;
    }
    let mut res: f64 = (&xs[0] - &problem.x_init).amax();
    for (t, st) in problem.stages.iter().enumerate() {
        let c = &st.cost;
        let d = &st.dynamics;
        let (x, u) = (&xs[t], &us[t]);
        let rx = &c.qxx * x + c.qux.tr_mul(u) + &c.qx1 + &ls[t] - d.fx.tr_mul(&ls[t + 1]);
        let ru = &c.qux * x + &c.quu * u + &c.qu1 - d.fu.tr_mul(&ls[t + 1]);
        let rd = &xs[t + 1] - d.step(x, u);
        res = res.max(rx.amax()).max(ru.amax()).max(rd.amax());
    }
    let term = &problem.terminal;
    let mut rt = &term.qxx * &xs[t_len] + &term.qx1 + &ls[t_len];
    if let Some((mu, x_term)) = endpoint {
        rt += mu;
        res = res.max((&xs[t_len] - x_term).amax());
    }
    res.max(rt.amax())
}
