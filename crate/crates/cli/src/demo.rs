//! Double-integrator demonstration.
//!
//! The problem is
//! `min α_T‖x_T‖² + Σ α‖x_t‖² + β‖u_t‖²` subject to
//! `x_{t+1} = [1 dt; 0 1] x_t + [0; dt] u_t`, `x_0 = [1, 0]`.
//! Serial, parallel and smoothed policies are computed once and then rolled
//! out on the nominal dynamics and on the disturbed dynamics
//! `x_{t+1} = … + [0; x1 / (x1² + 1e-4)]`.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use par_riccati_core::lqr::{evaluate_objective, max_deviation, rollout_with};
use par_riccati_core::parallel::{build_pool, make_partition, resolve_workers, smooth, solve_parallel_in};
use par_riccati_core::{
    riccati, AffinePolicy, LqrProblem, SolverError, Stage, StageCost, StageDynamics, TerminalCost, ToleranceSet,
};

use crate::io::{write_text, IoError};

#[derive(Debug, Clone, PartialEq)]
pub struct DemoConfig {
    pub dt: f64,
    pub horizon: usize,
    pub alpha: f64,
    pub alpha_terminal: f64,
    pub beta: f64,
    pub segments: usize,
    pub workers: Option<usize>,
    pub disturbed: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            horizon: 200,
            alpha: 10.0,
            alpha_terminal: 1e3,
            beta: 1e-2,
            segments: 3,
            workers: None,
            disturbed: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("invalid demo configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Io(#[from] IoError),
}

pub const POLICIES: [&str; 3] = ["serial", "parallel", "smoothed"];

/// Closed-loop trajectory of one policy on one set of dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub policy: &'static str,
    pub disturbed: bool,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub cost: f64,
}

impl Trajectory {
    pub fn file_name(&self) -> String {
        let dynamics = if self.disturbed { "disturbed" } else { "undisturbed" };
        format!("{}_{dynamics}.csv", self.policy)
    }

    /// CSV with header `t,x1,x2,u1`; the final row leaves `u1` empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x1,x2,u1\n");
        for (t, x) in self.states.iter().enumerate() {
            let u = self.controls.get(t).map_or(String::new(), |u| u[0].to_string());
            writeln!(s, "{t},{},{},{u}", x[0], x[1]).unwrap();
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct DemoOutput {
    pub trajectories: Vec<Trajectory>,
    /// Largest pairwise deviation between the three nominal rollouts.
    pub undisturbed_spread: f64,
}

impl DemoOutput {
    pub fn find(&self, policy: &str, disturbed: bool) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.policy == policy && t.disturbed == disturbed)
    }

    pub fn cost(&self, policy: &str, disturbed: bool) -> Option<f64> {
        self.find(policy, disturbed).map(|t| t.cost)
    }

    /// `dynamics,cost_serial,cost_parallel,cost_smoothed`, one row per dynamics.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("dynamics,cost_serial,cost_parallel,cost_smoothed\n");
        for disturbed in [false, true] {
            if self.find("serial", disturbed).is_none() {
                continue;
            }
            let name = if disturbed { "disturbed" } else { "undisturbed" };
            let c: Vec<String> = POLICIES.iter().map(|p| self.cost(p, disturbed).unwrap().to_string()).collect();
            writeln!(s, "{name},{}", c.join(",")).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), IoError> {
        for t in &self.trajectories {
            write_text(&dir.join(t.file_name()), &t.to_csv())?;
        }
        write_text(&dir.join("summary.csv"), &self.summary_csv())
    }
}

pub fn disturbance(x1: f64) -> f64 {
    x1 / (x1 * x1 + 1e-4)
}

pub fn double_integrator(cfg: &DemoConfig) -> Result<LqrProblem, DemoError> {
    if !(cfg.dt > 0.0) || cfg.horizon == 0 {
        return Err(DemoError::Config("dt must be positive and T at least 1".into()));
    }
    if [cfg.alpha, cfg.alpha_terminal, cfg.beta].iter().any(|w| !(*w >= 0.0)) {
        return Err(DemoError::Config("weights must be non-negative".into()));
    }
    if !(cfg.beta > 0.0) {
        return Err(DemoError::Config("beta must be positive for a strictly convex problem".into()));
    }
    if cfg.segments == 0 || cfg.segments > cfg.horizon {
        return Err(DemoError::Config(format!("J must lie in 1..={}", cfg.horizon)));
    }
    let fx = DMatrix::from_row_slice(2, 2, &[1.0, cfg.dt, 0.0, 1.0]);
    let fu = DMatrix::from_row_slice(2, 1, &[0.0, cfg.dt]);
    let stage = Stage {
        cost: StageCost::new(
            DMatrix::identity(2, 2) * (2.0 * cfg.alpha),
            DMatrix::zeros(1, 2),
            DMatrix::identity(1, 1) * (2.0 * cfg.beta),
            DVector::zeros(2),
            DVector::zeros(1),
        )?,
        dynamics: StageDynamics::new(fx, fu, DVector::zeros(2))?,
    };
    let terminal = TerminalCost::new(DMatrix::identity(2, 2) * (2.0 * cfg.alpha_terminal), DVector::zeros(2))?;
    Ok(LqrProblem::new(vec![stage; cfg.horizon], terminal, DVector::from_vec(vec![1.0, 0.0]))?)
}

fn simulate(
    p: &LqrProblem,
    policy: &'static str,
    policies: &[AffinePolicy],
    disturbed: bool,
) -> Result<Trajectory, SolverError> {
    let (states, controls) = rollout_with(p, policies, p.x_init(), |st, x, u| {
        let mut next = st.dynamics.step(x, u);
        if disturbed {
            next[1] += disturbance(x[0]);
        }
        next
    })?;
    let cost = evaluate_objective(p, &states, &controls)?;
    Ok(Trajectory {
        policy,
        disturbed,
        states,
        controls,
        cost,
    })
}

pub fn run_demo(cfg: &DemoConfig) -> Result<DemoOutput, DemoError> {
    let p = double_integrator(cfg)?;
    let tol = ToleranceSet::default();
    let pool = build_pool(resolve_workers(cfg.workers, cfg.segments));
    let serial = riccati::solve(&p)?;
    let par = solve_parallel_in(&pool, &p, &make_partition(cfg.horizon, cfg.segments)?, &tol)?;
    let smoothed = smooth(&pool, &p, &par, &tol)?;
    let sets: [&[AffinePolicy]; 3] = [&serial.policies, &par.solution.policies, &smoothed];

    let mut trajectories = Vec::new();
    let dynamics: &[bool] = if cfg.disturbed { &[false, true] } else { &[false] };
    for &disturbed in dynamics {
        for (name, policies) in POLICIES.iter().zip(sets) {
            trajectories.push(simulate(&p, name, policies, disturbed)?);
        }
    }
    let mut spread: f64 = 0.0;
    for a in &trajectories[..3] {
        for b in &trajectories[..3] {
            spread = spread.max(max_deviation(&a.states, &b.states)).max(max_deviation(&a.controls, &b.controls));
        }
    }
    Ok(DemoOutput {
        trajectories,
        undisturbed_spread: spread,
    })
}
