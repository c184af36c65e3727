//! Constraint-explicit LQR: policies, trajectories and multipliers of the
//! endpoint-constrained problem as affine functions of `(x_init, x_term)`.
//!
//! The backward pass carries a cost-to-go over the pair `(x, z)` with
//! `z = x_term`,
//!
//! ```text
//! V_t(x, z) = ½ xᵀVxx x + zᵀVzx x + ½ zᵀVzz z + vx1ᵀx + vz1ᵀz + c
//! ```
//!
//! and a constraint-to-go `Hx x + Hz z + h1` collecting the part of the
//! terminal constraint that earlier controls still have to satisfy. At each
//! stage the control splits as `u = Py y + Zw w`: `y` least-squares the
//! constraint residual and `w`, in the null space of the constraint Jacobian,
//! minimizes the cost. Where the constraint-to-go is empty the multiplier is
//! the value gradient. On the remaining tail it comes from the normal
//! equations of the stacked stationarity rows, which are block-tridiagonal
//! in time.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SolverError};
use crate::linalg::{AffineRows, BlockTridiagonal, RangeNullSplit, Svd};
use crate::lqr::{kkt_residual_with_endpoint, AffinePolicy, LqrProblem, LqrSolution, Stage, TerminalCost};
use crate::riccati::PlainValueFunction;
use crate::tolerance::ToleranceSet;

/// What the final state must satisfy.
#[derive(Debug, Clone, PartialEq)]
pub enum TerminalConstraint {
    /// No constraint; reduces to ordinary Riccati recursion.
    Free,
    /// `x_T = x_term` with `x_term` symbolic.
    Endpoint,
    /// `hx x_T + h1 = 0` with no endpoint dependence.
    Affine { hx: DMatrix<f64>, h1: DVector<f64> },
}

/// Cost-to-go in `(x, x_term)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub vxx: DMatrix<f64>,
    pub vzx: DMatrix<f64>,
    pub vzz: DMatrix<f64>,
    pub vx1: DVector<f64>,
    pub vz1: DVector<f64>,
    pub c: f64,
}

impl ValueFunction {
    fn terminal(terminal: &TerminalCost) -> Self {
        let n = terminal.qxx.nrows();
        Self {
            vxx: terminal.qxx.clone(),
            vzx: DMatrix::zeros(n, n),
            vzz: DMatrix::zeros(n, n),
            vx1: terminal.qx1.clone(),
            vz1: DVector::zeros(n),
            c: 0.0,
        }
    }

    fn from_joint(joint: &DMatrix<f64>, n: usize) -> Self {
        let vxx = joint.view((0, 0), (n, n));
        let vzz = joint.view((n, n), (n, n));
        Self {
            vxx: (vxx + vxx.transpose()) * 0.5,
            vzx: joint.view((n, 0), (n, n)).into_owned(),
            vzz: (vzz + vzz.transpose()) * 0.5,
            vx1: joint.view((0, 2 * n), (n, 1)).column(0).into_owned(),
            vz1: joint.view((n, 2 * n), (n, 1)).column(0).into_owned(),
            c: 0.5 * joint[(2 * n, 2 * n)],
        }
    }

    pub fn eval(&self, x: &DVector<f64>, z: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.vxx * x))
            + z.dot(&(&self.vzx * x))
            + 0.5 * z.dot(&(&self.vzz * z))
            + self.vx1.dot(x)
            + self.vz1.dot(z)
            + self.c
    }

    /// Fixes the endpoint, leaving a value function of the state alone.
    pub fn condition(&self, z: &DVector<f64>) -> PlainValueFunction {
        PlainValueFunction {
            vxx: self.vxx.clone(),
            vx1: &self.vx1 + self.vzx.tr_mul(z),
            c: self.c + 0.5 * z.dot(&(&self.vzz * z)) + self.vz1.dot(z),
        }
    }

    /// `[Vxx | Vzxᵀ | vx1]`, the coefficients of `∂V/∂x` in `[x; z; 1]`.
    pub fn gradient(&self) -> DMatrix<f64> {
        let n = self.vxx.nrows();
        let mut g = DMatrix::zeros(n, 2 * n + 1);
        g.columns_mut(0, n).copy_from(&self.vxx);
        g.columns_mut(n, n).copy_from(&self.vzx.transpose());
        g.column_mut(2 * n).copy_from(&self.vx1);
        g
    }

    /// The full `(x, z)` Hessian `[[Vxx, Vzxᵀ], [Vzx, Vzz]]`.
    pub fn hessian(&self) -> DMatrix<f64> {
        let n = self.vxx.nrows();
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        h.view_mut((0, 0), (n, n)).copy_from(&self.vxx);
        h.view_mut((0, n), (n, n)).copy_from(&self.vzx.transpose());
        h.view_mut((n, 0), (n, n)).copy_from(&self.vzx);
        h.view_mut((n, n), (n, n)).copy_from(&self.vzz);
        h
    }
}

/// Intermediate quantities of one backward stage, kept on request for
/// inspection.
#[derive(Debug, Clone)]
pub struct BackwardStageTerms {
    pub mxx: DMatrix<f64>,
    pub mux: DMatrix<f64>,
    pub muu: DMatrix<f64>,
    pub mzx: DMatrix<f64>,
    pub mzu: DMatrix<f64>,
    pub mzz: DMatrix<f64>,
    pub mx1: DVector<f64>,
    pub mu1: DVector<f64>,
    pub mz1: DVector<f64>,
    pub nx: DMatrix<f64>,
    pub nu: DMatrix<f64>,
    pub nz: DMatrix<f64>,
    pub n1: DVector<f64>,
    pub split: RangeNullSplit,
}

impl BackwardStageTerms {
    pub fn py(&self) -> &DMatrix<f64> {
        &self.split.py
    }

    pub fn zw(&self) -> &DMatrix<f64> {
        &self.split.zw
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    /// Keep all `T + 1` value functions and constraint-to-go sets rather than
    /// only the ones at `t = 0`.
    pub keep_history: bool,
    pub keep_stage_terms: bool,
    /// Keep [`ValueFunction::gradient`] at every stage whose
    /// constraint-to-go is empty.
    pub keep_gradients: bool,
}

impl BackwardOptions {
    pub fn full() -> Self {
        Self {
            keep_history: true,
            keep_stage_terms: true,
            keep_gradients: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointBackward {
    pub policies: Vec<AffinePolicy>,
    /// `T + 1` entries with `keep_history`, otherwise only `V_0`.
    pub values: Vec<ValueFunction>,
    /// Constraint-to-go after compression; same retention rule as `values`.
    pub constraints: Vec<AffineRows>,
    pub stage_terms: Vec<BackwardStageTerms>,
    /// Value gradients at `t = 0, …, t0` where `t0` is the last time with an
    /// empty constraint-to-go. Rows only accumulate backward in time, so these
    /// stages form a prefix. Empty unless requested.
    pub gradients: Vec<DMatrix<f64>>,
}

impl EndpointBackward {
    pub fn initial_value(&self) -> &ValueFunction {
        &self.values[0]
    }

    /// `(Hx0, Hz0, h10)`: the endpoints admit a solution iff this vanishes.
    pub fn feasibility(&self) -> &AffineRows {
        &self.constraints[0]
    }

    /// Independent feasibility rows that actually constrain the endpoints.
    pub fn null_dim(&self) -> usize {
        let f = self.feasibility();
        f.rows() - f.certificates
    }
}

fn initial_constraint(n: usize, constraint: &TerminalConstraint, rank_tol: f64) -> Result<AffineRows> {
    Ok(match constraint {
        TerminalConstraint::Free => AffineRows::empty(n),
        TerminalConstraint::Endpoint => AffineRows {
            hx: DMatrix::identity(n, n),
            hz: -DMatrix::identity(n, n),
            h1: DVector::zeros(n),
            certificates: 0,
        },
        TerminalConstraint::Affine { hx, h1 } => {
            if hx.ncols() != n || hx.nrows() != h1.len() {
                return Err(SolverError::DimensionMismatch(
                    "affine terminal constraint has the wrong shape".into(),
                ));
            }
            AffineRows {
                hx: hx.clone(),
                hz: DMatrix::zeros(hx.nrows(), n),
                h1: h1.clone(),
                certificates: 0,
            }
            .compress(rank_tol, hx.norm().max(h1.norm()))
        }
    })
}

/// Backward sweep over `stages`. A zero `terminal` encodes a sub-problem with
/// an endpoint constraint and no terminal cost. Error stage indices are offset
/// by `first_stage`.
pub fn backward_pass(
    stages: &[Stage],
    terminal: &TerminalCost,
    constraint: &TerminalConstraint,
    tol: &ToleranceSet,
    options: BackwardOptions,
    first_stage: usize,
) -> Result<EndpointBackward> {
    let n = terminal.qxx.nrows();
    let horizon = stages.len();
    let mut value = ValueFunction::terminal(terminal);
    let mut rows = initial_constraint(n, constraint, tol.rank_tol)?;
    let mut policies = Vec::with_capacity(horizon);
    let keep = |cap: usize| if options.keep_history { cap } else { 1 };
    let mut values = Vec::with_capacity(keep(horizon + 1));
    let mut constraints = Vec::with_capacity(keep(horizon + 1));
    let mut stage_terms = Vec::new();
    let mut gradients = Vec::new();
    if options.keep_gradients && rows.rows() == 0 {
        gradients.push(value.gradient());
    }
    let cols = 2 * n + 1;

    for (t, st) in stages.iter().enumerate().rev() {
        let (c, d) = (&st.cost, &st.dynamics);
        let m = c.control_dim();
        let v_fx = &value.vxx * &d.fx;
        let v_fu = &value.vxx * &d.fu;
        let g = &value.vx1 + &value.vxx * &d.f1;

        let mxx = &c.qxx + d.fx.tr_mul(&v_fx);
        let mux = &c.qux + d.fu.tr_mul(&v_fx);
        let muu = &c.quu + d.fu.tr_mul(&v_fu);
        let mx1 = &c.qx1 + d.fx.tr_mul(&g);
        let mu1 = &c.qu1 + d.fu.tr_mul(&g);
        let mzx = &value.vzx * &d.fx;
        let mzu = &value.vzx * &d.fu;
        let mz1 = &value.vz1 + &value.vzx * &d.f1;
        let m0 = value.c + 0.5 * d.f1.dot(&(&value.vxx * &d.f1)) + value.vx1.dot(&d.f1);

        // Constraint Jacobians at t, built from the constraint-to-go at t+1.
        let r = rows.rows();
        let mut n_joint = DMatrix::zeros(r, cols);
        n_joint.view_mut((0, 0), (r, n)).copy_from(&(&rows.hx * &d.fx));
        n_joint.view_mut((0, n), (r, n)).copy_from(&rows.hz);
        n_joint
            .column_mut(2 * n)
            .copy_from(&(&rows.hx * &d.f1 + &rows.h1));
        let nu = &rows.hx * &d.fu;
        let split = RangeNullSplit::new(&nu, tol.rank_tol, rows.hx.norm() * d.fu.norm());

        // u = U [x; z; 1], first the range-space part.
        let mut u_coef = if split.rank > 0 {
            -(&split.py * (&split.pinv * &n_joint))
        } else {
            DMatrix::zeros(m, cols)
        };
        // Cross terms of the stage quadratic between u and [x; z; 1].
        let mut cross = DMatrix::zeros(m, cols);
        cross.view_mut((0, 0), (m, n)).copy_from(&mux);
        cross.view_mut((0, n), (m, n)).copy_from(&mzu.transpose());
        cross.column_mut(2 * n).copy_from(&mu1);
        if split.rank < m {
            let zw = &split.zw;
            let reduced = zw.tr_mul(&(&muu * zw));
            let chol = reduced
                .cholesky()
                .ok_or(SolverError::CholeskyFailure { stage: first_stage + t })?;
            let grad = &muu * &u_coef + &cross;
            let w = -chol.solve(&zw.tr_mul(&grad));
            u_coef += zw * w;
        }

        let kx = u_coef.columns(0, n).into_owned();
        let kz = u_coef.columns(n, n).into_owned();
        let k1 = u_coef.column(2 * n).into_owned();

        // Cost-to-go as one quadratic form over [x; z; 1].
        let mut joint = DMatrix::zeros(cols, cols);
        joint.view_mut((0, 0), (n, n)).copy_from(&mxx);
        joint.view_mut((n, 0), (n, n)).copy_from(&mzx);
        joint.view_mut((0, n), (n, n)).copy_from(&mzx.transpose());
        joint.view_mut((n, n), (n, n)).copy_from(&value.vzz);
        joint.view_mut((0, 2 * n), (n, 1)).copy_from(&mx1);
        joint.view_mut((2 * n, 0), (1, n)).copy_from(&mx1.transpose());
        joint.view_mut((n, 2 * n), (n, 1)).copy_from(&mz1);
        joint.view_mut((2 * n, n), (1, n)).copy_from(&mz1.transpose());
        joint[(2 * n, 2 * n)] = 2.0 * m0;
        // UᵀC + CᵀU + UᵀMuu U = CᵀU + UᵀG with G = Muu U + C. The w-step
        // makes ZwᵀG vanish, so UᵀG = (UᵀPy)(PyᵀG).
        joint += cross.tr_mul(&u_coef);
        if split.rank > 0 {
            let g = &muu * &u_coef + &cross;
            joint += u_coef.tr_mul(&split.py) * split.py.tr_mul(&g);
        }
        let next_value = ValueFunction::from_joint(&joint, n);

        let projected = split.project_residual(&n_joint);
        let next_rows = AffineRows {
            hx: projected.columns(0, n).into_owned(),
            hz: projected.columns(n, n).into_owned(),
            h1: projected.column(2 * n).into_owned(),
            certificates: rows.certificates,
        }
        .compress(tol.rank_tol, n_joint.norm());

        if options.keep_stage_terms {
            stage_terms.push(BackwardStageTerms {
                mxx,
                mux,
                muu,
                mzx,
                mzu,
                mzz: value.vzz.clone(),
                mx1,
                mu1,
                mz1,
                nx: n_joint.columns(0, n).into_owned(),
                nu,
                nz: rows.hz.clone(),
                n1: n_joint.column(2 * n).into_owned(),
                split,
            });
        }
        if options.keep_gradients && next_rows.rows() == 0 {
            gradients.push(next_value.gradient());
        }
        if options.keep_history {
            values.push(value);
            constraints.push(rows);
        }
        value = next_value;
        rows = next_rows;
        policies.push(AffinePolicy { kx, kz, k1 });
    }
    values.push(value);
    constraints.push(rows);
    values.reverse();
    constraints.reverse();
    policies.reverse();
    stage_terms.reverse();
    gradients.reverse();
    Ok(EndpointBackward {
        policies,
        values,
        constraints,
        stage_terms,
        gradients,
    })
}

/// Affine map of `(x_init, x_term, ν)`, stored as `[A | Z | c | N]` with
/// `A`, `Z` k×n, `c` a column, and one column per null-space coordinate `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub coef: DMatrix<f64>,
    n: usize,
}

impl AffineMap {
    pub fn new(coef: DMatrix<f64>, n: usize) -> Self {
        debug_assert!(coef.ncols() > 2 * n);
        Self { coef, n }
    }

    /// Coefficient of `x_init`.
    pub fn a(&self) -> DMatrix<f64> {
        self.coef.columns(0, self.n).into_owned()
    }

    /// Coefficient of `x_term`.
    pub fn z(&self) -> DMatrix<f64> {
        self.coef.columns(self.n, self.n).into_owned()
    }

    pub fn offset(&self) -> DVector<f64> {
        self.coef.column(2 * self.n).into_owned()
    }

    /// Coefficient of the null-space coordinates.
    pub fn null(&self) -> DMatrix<f64> {
        let k = self.null_dim();
        self.coef.columns(2 * self.n + 1, k).into_owned()
    }

    pub fn null_dim(&self) -> usize {
        self.coef.ncols() - 2 * self.n - 1
    }

    pub fn eval(&self, a: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.eval_with_null(a, z, &DVector::zeros(self.null_dim()))
    }

    pub fn eval_with_null(&self, a: &DVector<f64>, z: &DVector<f64>, nu: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let mut y = self.coef.columns(0, n) * a + self.coef.columns(n, n) * z + self.coef.column(2 * n);
        if nu.len() > 0 {
            y += self.coef.columns(2 * n + 1, nu.len()) * nu;
        }
        y
    }
}

/// State and control maps `x_t = Ra x_init + Rz x_term + r1`,
/// `u_t = Sa x_init + Sz x_term + s1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMaps {
    pub states: Vec<AffineMap>,
    pub controls: Vec<AffineMap>,
}

pub fn forward_pass(policies: &[AffinePolicy], stages: &[Stage]) -> Result<TrajectoryMaps> {
    if policies.len() != stages.len() {
        return Err(SolverError::DimensionMismatch(format!(
            "{} policies for {} stages",
            policies.len(),
            stages.len()
        )));
    }
    let n = stages.first().map_or(0, |s| s.dynamics.fx.nrows());
    let cols = 2 * n + 1;
    let mut x = DMatrix::zeros(n, cols);
    x.view_mut((0, 0), (n, n)).fill_with_identity();
    let mut states = Vec::with_capacity(stages.len() + 1);
    let mut controls = Vec::with_capacity(stages.len());
    for (pol, st) in policies.iter().zip(stages) {
        let d = &st.dynamics;
        let mut u = &pol.kx * &x;
        let mut kz = u.columns_mut(n, n);
        kz += &pol.kz;
        let mut k = u.column_mut(2 * n);
        k += &pol.k1;
        let mut next = &d.fx * &x + &d.fu * &u;
        let mut c = next.column_mut(2 * n);
        c += &d.f1;
        states.push(AffineMap::new(x, n));
        controls.push(AffineMap::new(u, n));
        x = next;
    }
    states.push(AffineMap::new(x, n));
    Ok(TrajectoryMaps { states, controls })
}

/// Multiplier maps `λ_t = La x_init + Lz x_term + l1 (+ Lν ν)` and, for the
/// endpoint problem, `μ_T = Ea x_init + Ez x_term + e1 (+ Eν ν)`.
///
/// When the endpoints are tied by `null_dim > 0` feasibility rows, the
/// multipliers are unique only up to a `null_dim`-dimensional family; the
/// trailing `ν` columns span it.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiplierMaps {
    pub lambdas: Vec<AffineMap>,
    pub mu: Option<AffineMap>,
}

/// Solves the normal equations `A Aᵀ λ = A b` of the stacked stationarity rows
/// with a matrix right-hand side holding the `x_init`, `x_term` and constant
/// coefficients.
pub fn multiplier_pass(
    stages: &[Stage],
    terminal: &TerminalCost,
    maps: &TrajectoryMaps,
    constraint: &TerminalConstraint,
    null_dim: usize,
) -> Result<MultiplierMaps> {
    let with_mu = match constraint {
        TerminalConstraint::Free => false,
        TerminalConstraint::Endpoint => true,
        TerminalConstraint::Affine { .. } => {
            return Err(SolverError::DimensionMismatch(
                "multipliers are only assembled for free or endpoint terminal conditions".into(),
            ))
        }
    };
    let horizon = stages.len();
    if maps.states.len() != horizon + 1 || maps.controls.len() != horizon {
        return Err(SolverError::DimensionMismatch("trajectory maps do not match the horizon".into()));
    }
    let n = terminal.qxx.nrows();
    let cols = 2 * n + 1;
    let eye = DMatrix::<f64>::identity(n, n);

    // b-blocks of the x- and u-stationarity rows.
    let with_const = |mut b: DMatrix<f64>, q: &DVector<f64>| {
        let mut c = b.column_mut(2 * n);
        c += q;
        -b
    };
    let bx: Vec<DMatrix<f64>> = stages
        .iter()
        .enumerate()
        .map(|(t, st)| {
            let c = &st.cost;
            let (x, u) = (&maps.states[t].coef, &maps.controls[t].coef);
            with_const(&c.qxx * x + c.qux.tr_mul(u), &c.qx1)
        })
        .collect();
    let bt = with_const(&terminal.qxx * &maps.states[horizon].coef, &terminal.qx1);

    let bu: Vec<DMatrix<f64>> = stages
        .iter()
        .enumerate()
        .map(|(t, st)| {
            let c = &st.cost;
            let (x, u) = (&maps.states[t].coef, &maps.controls[t].coef);
            with_const(&c.qux * x + &c.quu * u, &c.qu1)
        })
        .collect();

    let nblocks = horizon + 1 + usize::from(with_mu);
    let mut diag = Vec::with_capacity(nblocks);
    let mut upper = Vec::with_capacity(nblocks - 1);
    diag.push(eye.clone());
    for st in stages {
        let d = &st.dynamics;
        let mut sigma = &eye + &d.fx * d.fx.transpose() + &d.fu * d.fu.transpose();
        sigma = (&sigma + sigma.transpose()) * 0.5;
        diag.push(sigma);
        upper.push(-d.fx.transpose());
    }
    if with_mu {
        diag.push(eye.clone());
        upper.push(eye.clone());
    }
    let lower = upper.iter().map(|u| u.transpose()).collect();
    let system = BlockTridiagonal::new(lower, diag, upper)?;

    // `A r` for residual blocks `r` of the stationarity rows.
    let project = |rx: &[DMatrix<f64>], ru: &[DMatrix<f64>], rt: &DMatrix<f64>| {
        let mut rhs = Vec::with_capacity(nblocks);
        rhs.push(rx.first().unwrap_or(rt).clone());
        for (t, st) in stages.iter().enumerate() {
            let d = &st.dynamics;
            let next = if t + 1 < horizon { &rx[t + 1] } else { rt };
            rhs.push(next - &d.fx * &rx[t] - &d.fu * &ru[t]);
        }
        if with_mu {
            rhs.push(rt.clone());
        }
        rhs
    };
    let solve = |rhs: &[DMatrix<f64>], extra: usize| -> Result<Vec<DMatrix<f64>>> {
        if !with_mu {
            return system.solve(rhs);
        }
        system.solve_with_last(rhs, |block, schur, b| {
            // The Schur complement of the μ block is singular along the
            // `null_dim` directions in which the endpoints are tied.
            let svd = Svd::new(schur);
            let sv = &svd.singular_values;
            let keep = n.checked_sub(null_dim).ok_or(SolverError::FactorizationFailure { block })?;
            if keep > 0 && !(sv[keep - 1] > 1e-14 * sv[0]) {
                return Err(SolverError::FactorizationFailure { block });
            }
            let mut part = svd.u.columns(0, keep).tr_mul(b);
            for i in 0..keep {
                part.row_mut(i).scale_mut(1.0 / sv[i]);
            }
            let width = b.ncols();
            let mut out = DMatrix::zeros(n, width + extra);
            out.columns_mut(0, width).copy_from(&(svd.v.columns(0, keep) * part));
            out.columns_mut(width, extra).copy_from(&svd.v.columns(keep, extra));
            Ok(out)
        })
    };

    let mut solved = solve(&project(&bx, &bu, &bt), if with_mu { null_dim } else { 0 })?;

    // The normal equations square the conditioning of the stationarity rows,
    // so one refinement step on the residual recovers the lost digits.
    let lam = |t: usize| solved[t].columns(0, cols);
    let rx: Vec<DMatrix<f64>> = stages
        .iter()
        .enumerate()
        .map(|(t, st)| &bx[t] - lam(t) + st.dynamics.fx.tr_mul(&lam(t + 1)))
        .collect();
    let ru: Vec<DMatrix<f64>> = stages
        .iter()
        .enumerate()
        .map(|(t, st)| &bu[t] + st.dynamics.fu.tr_mul(&lam(t + 1)))
        .collect();
    let mut rt = &bt - lam(horizon);
    if with_mu {
        rt -= solved[horizon + 1].columns(0, cols);
    }
    let correction = solve(&project(&rx, &ru, &rt), 0)?;
    for (s, c) in solved.iter_mut().zip(&correction) {
        let mut head = s.columns_mut(0, cols);
        head += c;
    }

    let mut maps_out: Vec<AffineMap> = solved.into_iter().map(|c| AffineMap::new(c, n)).collect();
    let mu = with_mu.then(|| maps_out.pop().expect("μ block"));
    Ok(MultiplierMaps { lambdas: maps_out, mu })
}

/// Multiplier maps from the value gradients on the stages with an empty
/// constraint-to-go and from [`multiplier_pass`] on the tail after them.
/// The tail's own first multiplier row is free, so its solution is the
/// restriction of the full one.
fn assemble_multipliers(
    stages: &[Stage],
    terminal: &TerminalCost,
    backward: &EndpointBackward,
    maps: &TrajectoryMaps,
    constraint: &TerminalConstraint,
) -> Result<MultiplierMaps> {
    let horizon = stages.len();
    let grads = &backward.gradients;
    if grads.is_empty() {
        return multiplier_pass(stages, terminal, maps, constraint, backward.null_dim());
    }
    let n = terminal.qxx.nrows();
    let from_gradient = |t: usize| {
        let g = &grads[t];
        let mut l = g.columns(0, n) * &maps.states[t].coef;
        let mut zc = l.columns_mut(n, n + 1);
        zc += g.columns(n, n + 1);
        AffineMap::new(-l, n)
    };
    let t0 = grads.len() - 1;
    if t0 == horizon && matches!(constraint, TerminalConstraint::Free) {
        return Ok(MultiplierMaps {
            lambdas: (0..=horizon).map(from_gradient).collect(),
            mu: None,
        });
    }
    let tail_maps = TrajectoryMaps {
        states: maps.states[t0..].to_vec(),
        controls: maps.controls[t0..].to_vec(),
    };
    let tail = multiplier_pass(&stages[t0..], terminal, &tail_maps, constraint, 0)?;
    let mut lambdas: Vec<AffineMap> = (0..t0).map(from_gradient).collect();
    lambdas.extend(tail.lambdas);
    Ok(MultiplierMaps { lambdas, mu: tail.mu })
}

/// Everything about the endpoint-constrained problem as affine functions of
/// its endpoints.
#[derive(Debug, Clone)]
pub struct EndpointAffineSolution {
    pub backward: EndpointBackward,
    pub trajectory: TrajectoryMaps,
    pub multipliers: MultiplierMaps,
}

impl EndpointAffineSolution {
    pub fn compute(
        stages: &[Stage],
        terminal: &TerminalCost,
        constraint: &TerminalConstraint,
        tol: &ToleranceSet,
        options: BackwardOptions,
        first_stage: usize,
    ) -> Result<Self> {
        let options = BackwardOptions {
            keep_gradients: true,
            ..options
        };
        let backward = backward_pass(stages, terminal, constraint, tol, options, first_stage)?;
        let trajectory = forward_pass(&backward.policies, stages)?;
        let multipliers = assemble_multipliers(stages, terminal, &backward, &trajectory, constraint)?;
        Ok(Self {
            backward,
            trajectory,
            multipliers,
        })
    }

    pub fn null_dim(&self) -> usize {
        self.backward.null_dim()
    }

    pub fn feasibility_residual(&self, a: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        self.backward.feasibility().eval(a, z)
    }

    pub fn states(&self, a: &DVector<f64>, z: &DVector<f64>) -> Vec<DVector<f64>> {
        self.trajectory.states.iter().map(|s| s.eval(a, z)).collect()
    }

    pub fn controls(&self, a: &DVector<f64>, z: &DVector<f64>) -> Vec<DVector<f64>> {
        self.trajectory.controls.iter().map(|s| s.eval(a, z)).collect()
    }

    pub fn lambdas(&self, a: &DVector<f64>, z: &DVector<f64>, nu: &DVector<f64>) -> Vec<DVector<f64>> {
        self.multipliers
            .lambdas
            .iter()
            .map(|l| l.eval_with_null(a, z, nu))
            .collect()
    }

    pub fn mu(&self, a: &DVector<f64>, z: &DVector<f64>, nu: &DVector<f64>) -> Option<DVector<f64>> {
        self.multipliers.mu.as_ref().map(|m| m.eval_with_null(a, z, nu))
    }

    /// Policies with the endpoint folded in.
    pub fn folded_policies(&self, z: &DVector<f64>) -> Vec<AffinePolicy> {
        self.backward.policies.iter().map(|p| p.fold(z)).collect()
    }
}

/// Numeric solution of the endpoint-constrained problem.
#[derive(Debug, Clone)]
pub struct EndpointSolution {
    pub solution: LqrSolution,
    pub mu: DVector<f64>,
    /// ∞-norm of `Hx0 x_init + Hz0 x_term + h10`.
    pub feasibility_residual: f64,
    pub affine: EndpointAffineSolution,
}

/// Solves `problem` with the extra constraint `x_T = x_term`.
pub fn solve_endpoint(problem: &LqrProblem, x_term: &DVector<f64>, tol: &ToleranceSet) -> Result<EndpointSolution> {
    let n = problem.state_dim();
    if x_term.len() != n {
        return Err(SolverError::DimensionMismatch("x_term has the wrong length".into()));
    }
    let affine = EndpointAffineSolution::compute(
        problem.stages(),
        problem.terminal(),
        &TerminalConstraint::Endpoint,
        tol,
        BackwardOptions {
            keep_history: true,
            ..BackwardOptions::default()
        },
        0,
    )?;
    let a = problem.x_init();
    let residual = affine.feasibility_residual(a, x_term).amax();
    let residual = if residual.is_finite() { residual } else { f64::INFINITY };
    let scale = 1.0 + a.amax() + x_term.amax();
    if affine.feasibility_residual(a, x_term).len() > 0 && !(residual <= tol.feas_tol * scale) {
        return Err(SolverError::Infeasible { segment: 0, residual });
    }
    let nu = DVector::zeros(affine.null_dim());
    let states = affine.states(a, x_term);
    let controls = affine.controls(a, x_term);
    let lambdas = affine.lambdas(a, x_term, &nu);
    let mu = affine.mu(a, x_term, &nu).expect("endpoint multiplier");
    let mut solution = LqrSolution::assemble(problem, states, controls, lambdas, affine.folded_policies(x_term))?;
    solution.kkt_residual_inf = kkt_residual_with_endpoint(problem, &solution, &mu, x_term);
    Ok(EndpointSolution {
        solution,
        mu,
        feasibility_residual: if residual.is_finite() { residual } else { 0.0 },
        affine,
    })
}
