//! Horizon-parallel solver: independent segment solves tied together by a
//! block-tridiagonal system in the unknown link states.
//!
//! Segments `j < J−1` are endpoint-constrained problems without terminal cost
//! whose trajectories and multipliers are affine in their two link states; the
//! last segment keeps the terminal cost and is solved by plain Riccati
//! recursion. Matching each left segment's endpoint multiplier with the right
//! segment's initial multiplier gives one block row per interior link.
//!
//! A segment that cannot reach every terminal state from every initial state
//! ties its link states by `r > 0` feasibility rows. Its endpoint multiplier
//! then carries `r` free coordinates `ν`, and the link system gains those
//! coordinates as unknowns and the feasibility rows as equations, keeping it
//! square and block-tridiagonal.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rayon::ThreadPool;

use crate::endpoint::{BackwardOptions, EndpointAffineSolution, TerminalConstraint};
use crate::error::{Result, SolverError};
use crate::linalg::BlockTridiagonal;
use crate::lqr::{rollout, AffinePolicy, LqrProblem, LqrSolution, TerminalCost};
use crate::riccati::{self, PlainValueFunction, SerialBackward};
use crate::tolerance::ToleranceSet;

/// Environment variable overriding the default worker count.
pub const WORKERS_ENV: &str = "PAR_RICCATI_WORKERS";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    split_times: Vec<usize>,
}

impl Partition {
    /// Custom split times `0 = τ_0 < τ_1 < … < τ_J = T`.
    pub fn from_split_times(split_times: Vec<usize>, horizon: usize) -> Result<Self> {
        let ok = split_times.len() >= 2
            && split_times[0] == 0
            && *split_times.last().unwrap() == horizon
            && split_times.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(SolverError::InvalidPartition(format!(
                "split times {split_times:?} are not strictly increasing from 0 to {horizon}"
            )));
        }
        Ok(Self { split_times })
    }

    pub fn num_segments(&self) -> usize {
        self.split_times.len() - 1
    }

    pub fn split_times(&self) -> &[usize] {
        &self.split_times
    }

    pub fn segment(&self, j: usize) -> Range<usize> {
        self.split_times[j]..self.split_times[j + 1]
    }

    pub fn horizon(&self) -> usize {
        *self.split_times.last().unwrap()
    }
}

/// Balanced split of `0..horizon` into `segments` pieces whose lengths differ
/// by at most one, longer pieces first.
pub fn make_partition(horizon: usize, segments: usize) -> Result<Partition> {
    if segments == 0 || segments > horizon {
        return Err(SolverError::InvalidPartition(format!(
            "need 1 ≤ J ≤ T, got J = {segments}, T = {horizon}"
        )));
    }
    let base = horizon / segments;
    let extra = horizon % segments;
    let mut split_times = Vec::with_capacity(segments + 1);
    let mut t = 0;
    split_times.push(0);
    for j in 0..segments {
        t += base + usize::from(j < extra);
        split_times.push(t);
    }
    Partition::from_split_times(split_times, horizon)
}

/// Worker count: `requested`, else `PAR_RICCATI_WORKERS`, else
/// `min(segments, available cores)`.
pub fn resolve_workers(requested: Option<usize>, segments: usize) -> usize {
    let env = std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&w| w > 0);
    requested.filter(|&w| w > 0).or(env).unwrap_or_else(|| {
        let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
        segments.clamp(1, cores.max(1))
    })
}

pub fn build_pool(workers: usize) -> ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .thread_name(|i| format!("riccati-worker-{i}"))
        .build()
        .expect("thread pool")
}

/// One segment's sub-solution before the link states are known.
#[derive(Debug, Clone)]
pub enum SegmentSolve {
    Endpoint(Box<EndpointAffineSolution>),
    Last(SerialBackward),
}

/// Link-matching equations with unknown blocks `B_k = (ν_{k−1}, x_link_k)`,
/// `k = 1..J−1`.
#[derive(Debug, Clone)]
pub struct LinkSystem {
    pub matrix: BlockTridiagonal,
    pub rhs: Vec<DVector<f64>>,
    /// Null-coordinate count `r_j` of each endpoint segment.
    pub null_dims: Vec<usize>,
    pub link_points: Vec<DVector<f64>>,
    pub null_coords: Vec<DVector<f64>>,
    /// ∞-norm residual of the solved system.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct ParallelSolution {
    pub solution: LqrSolution,
    pub partition: Partition,
    /// `None` for a single segment.
    pub link: Option<LinkSystem>,
    pub segments: Vec<SegmentSolve>,
    /// Largest `‖μ^{(j)} + λ_0^{(j+1)}‖∞` over interior links.
    pub link_mismatch: f64,
    /// Per-segment feasibility residuals at the solved link states.
    pub feasibility_residuals: Vec<f64>,
    pub workers: usize,
}

impl ParallelSolution {
    /// Link states `x_{τ_0}, …, x_{τ_{J−1}}`, starting with `x_init`.
    pub fn segment_starts(&self) -> Vec<&DVector<f64>> {
        self.partition.split_times()[..self.partition.num_segments()]
            .iter()
            .map(|&t| &self.solution.states[t])
            .collect()
    }
}

pub fn solve_parallel(problem: &LqrProblem, segments: usize, workers: Option<usize>) -> Result<ParallelSolution> {
    let partition = make_partition(problem.horizon(), segments)?;
    let pool = build_pool(resolve_workers(workers, segments));
    solve_parallel_in(&pool, problem, &partition, &ToleranceSet::default())
}

/// Runs all segment work on `pool`; results are gathered by segment index.
pub fn solve_parallel_in(
    pool: &ThreadPool,
    problem: &LqrProblem,
    partition: &Partition,
    tol: &ToleranceSet,
) -> Result<ParallelSolution> {
    if partition.horizon() != problem.horizon() {
        return Err(SolverError::InvalidPartition(format!(
            "partition covers {} stages, problem has {}",
            partition.horizon(),
            problem.horizon()
        )));
    }
    let workers = pool.current_num_threads();
    let nseg = partition.num_segments();
    if nseg == 1 {
        let solution = riccati::solve(problem)?;
        let backward = SerialBackward {
            policies: solution.policies.clone(),
            values: Vec::new(),
        };
        return Ok(ParallelSolution {
            solution,
            partition: partition.clone(),
            link: None,
            segments: vec![SegmentSolve::Last(backward)],
            link_mismatch: 0.0,
            feasibility_residuals: Vec::new(),
            workers,
        });
    }

    let segments = pool.install(|| {
        (0..nseg)
            .into_par_iter()
            .map(|j| solve_segment(problem, partition, j, tol))
            .collect::<Result<Vec<_>>>()
    })?;

    let link = solve_link_system(problem, &segments)?;
    let mut starts = Vec::with_capacity(nseg + 1);
    starts.push(problem.x_init().clone());
    starts.extend(link.link_points.iter().cloned());
    let pieces = pool.install(|| {
        (0..nseg)
            .into_par_iter()
            .map(|j| evaluate_segment(problem, partition, &segments, &link, &starts, j))
            .collect::<Result<Vec<_>>>()
    })?;

    let n = problem.state_dim();
    let mut states = Vec::with_capacity(problem.horizon() + 1);
    let mut controls = Vec::with_capacity(problem.horizon());
    let mut lambdas = Vec::with_capacity(problem.horizon() + 1);
    let mut policies = Vec::with_capacity(problem.horizon());
    let mut link_mismatch = 0.0f64;
    let mut feasibility_residuals = Vec::with_capacity(nseg - 1);
    for (j, piece) in pieces.into_iter().enumerate() {
        let last = j + 1 == nseg;
        let keep = piece.states.len() - usize::from(!last);
        states.extend(piece.states.into_iter().take(keep));
        lambdas.extend(piece.lambdas.into_iter().take(keep));
        controls.extend(piece.controls);
        policies.extend(piece.policies);
        if let Some(mu) = piece.mu {
            // λ at the link comes from the right segment.
            let right = lambdas_start(&segments[j + 1], &starts, &link, j + 1, n);
            link_mismatch = link_mismatch.max((&mu + right).amax());
        }
        if let Some(r) = piece.feasibility {
            feasibility_residuals.push(r);
        }
    }
    let solution = LqrSolution::assemble(problem, states, controls, lambdas, policies)?;
    Ok(ParallelSolution {
        solution,
        partition: partition.clone(),
        link: Some(link),
        segments,
        link_mismatch,
        feasibility_residuals,
        workers,
    })
}

fn solve_segment(problem: &LqrProblem, partition: &Partition, j: usize, tol: &ToleranceSet) -> Result<SegmentSolve> {
    let range = partition.segment(j);
    let first = range.start;
    let stages = &problem.stages()[range];
    if j + 1 == partition.num_segments() {
        let backward = riccati::backward_pass_stages(stages, PlainValueFunction::from_terminal(problem.terminal()), first)?;
        return Ok(SegmentSolve::Last(backward));
    }
    let zero = TerminalCost::zero(problem.state_dim());
    let affine = EndpointAffineSolution::compute(
        stages,
        &zero,
        &TerminalConstraint::Endpoint,
        tol,
        BackwardOptions::default(),
        first,
    )?;
    let feas = affine.backward.feasibility();
    if feas.certificates > 0 {
        let residual = feas.h1.rows(feas.rows() - feas.certificates, feas.certificates).amax();
        return Err(SolverError::Infeasible { segment: j, residual });
    }
    Ok(SegmentSolve::Endpoint(Box::new(affine)))
}

fn endpoint(seg: &SegmentSolve) -> &EndpointAffineSolution {
    match seg {
        SegmentSolve::Endpoint(a) => a,
        SegmentSolve::Last(_) => unreachable!("only the final segment is unconstrained"),
    }
}

/// `λ_0` of segment `j` at the solved link values.
fn lambdas_start(seg: &SegmentSolve, starts: &[DVector<f64>], link: &LinkSystem, j: usize, n: usize) -> DVector<f64> {
    match seg {
        SegmentSolve::Last(bw) => bw.values[0].multiplier(&starts[j]),
        SegmentSolve::Endpoint(a) => {
            let nu = link.null_coords.get(j).cloned().unwrap_or_else(|| DVector::zeros(0));
            debug_assert_eq!(starts[j].len(), n);
            a.multipliers.lambdas[0].eval_with_null(&starts[j], &starts[j + 1], &nu)
        }
    }
}

/// Assembles and solves the link system.
pub fn solve_link_system(problem: &LqrProblem, segments: &[SegmentSolve]) -> Result<LinkSystem> {
    let n = problem.state_dim();
    let nseg = segments.len();
    let nlinks = nseg - 1;
    let null_dims: Vec<usize> = segments[..nlinks].iter().map(|s| endpoint(s).null_dim()).collect();
    let x_init = problem.x_init();

    let mut diag = Vec::with_capacity(nlinks);
    let mut lower = Vec::with_capacity(nlinks.saturating_sub(1));
    let mut upper = Vec::with_capacity(nlinks.saturating_sub(1));
    let mut rhs = Vec::with_capacity(nlinks);
    // Block k (1-based link index) holds (ν_{k−1}, x_k); equations are
    // (feasibility of segment k−1, multiplier match at link k).
    for k in 1..=nlinks {
        let left = endpoint(&segments[k - 1]);
        let r = null_dims[k - 1];
        let feas = left.backward.feasibility();
        let mu = left.multipliers.mu.as_ref().expect("endpoint multiplier");
        let size = r + n;
        let mut d = DMatrix::zeros(size, size);
        d.view_mut((0, r), (r, n)).copy_from(&feas.hz.rows(0, r));
        d.view_mut((r, 0), (n, r)).copy_from(&mu.null());
        let mut b = DVector::zeros(size);
        b.rows_mut(0, r).copy_from(&(-feas.h1.rows(0, r)));
        b.rows_mut(r, n).copy_from(&(-mu.offset()));
        let mut dz = mu.z();
        match &segments[k] {
            SegmentSolve::Last(bw) => {
                let v = &bw.values[0];
                dz -= &v.vxx;
                let mut br = b.rows_mut(r, n);
                br += &v.vx1;
            }
            SegmentSolve::Endpoint(right) => {
                let lam = &right.multipliers.lambdas[0];
                dz += lam.a();
                let mut br = b.rows_mut(r, n);
                br -= lam.offset();
                let rn = null_dims[k];
                let mut u = DMatrix::zeros(size, rn + n);
                u.view_mut((r, 0), (n, rn)).copy_from(&lam.null());
                u.view_mut((r, rn), (n, n)).copy_from(&lam.z());
                upper.push(u);
            }
        }
        d.view_mut((r, r), (n, n)).copy_from(&dz);
        if k == 1 {
            let fa = feas.hx.rows(0, r) * x_init;
            let mut bf = b.rows_mut(0, r);
            bf -= fa;
            let mut bm = b.rows_mut(r, n);
            bm -= mu.a() * x_init;
        } else {
            let prev = null_dims[k - 2] + n;
            let mut l = DMatrix::zeros(size, prev);
            l.view_mut((0, prev - n), (r, n)).copy_from(&feas.hx.rows(0, r));
            l.view_mut((r, prev - n), (n, n)).copy_from(&mu.a());
            lower.push(l);
        }
        diag.push(d);
        rhs.push(b);
    }
    let matrix = BlockTridiagonal::new(lower, diag, upper)?;
    let rhs_blocks: Vec<DMatrix<f64>> = rhs.iter().map(|b| DMatrix::from_column_slice(b.len(), 1, b.as_slice())).collect();
    let solved = matrix.solve(&rhs_blocks).map_err(|e| match e {
        SolverError::FactorizationFailure { block } => SolverError::LinkSingular { block },
        other => other,
    })?;
    let residual = matrix
        .mul(&solved)
        .iter()
        .zip(&rhs_blocks)
        .map(|(ax, b)| (ax - b).amax())
        .fold(0.0, f64::max);
    let mut link_points = Vec::with_capacity(nlinks);
    let mut null_coords = Vec::with_capacity(nlinks);
    for (k, x) in solved.iter().enumerate() {
        let r = null_dims[k];
        null_coords.push(x.view((0, 0), (r, 1)).column(0).into_owned());
        link_points.push(x.view((r, 0), (n, 1)).column(0).into_owned());
    }
    Ok(LinkSystem {
        matrix,
        rhs,
        null_dims,
        link_points,
        null_coords,
        residual,
    })
}

struct SegmentPiece {
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
    lambdas: Vec<DVector<f64>>,
    policies: Vec<AffinePolicy>,
    mu: Option<DVector<f64>>,
    feasibility: Option<f64>,
}

fn evaluate_segment(
    problem: &LqrProblem,
    partition: &Partition,
    segments: &[SegmentSolve],
    link: &LinkSystem,
    starts: &[DVector<f64>],
    j: usize,
) -> Result<SegmentPiece> {
    let a = &starts[j];
    match &segments[j] {
        SegmentSolve::Last(bw) => {
            let stages = &problem.stages()[partition.segment(j)];
            let sub = LqrProblem::new(stages.to_vec(), problem.terminal().clone(), a.clone())?;
            let (states, controls) = rollout(&sub, &bw.policies, a)?;
            let lambdas = states.iter().zip(&bw.values).map(|(x, v)| v.multiplier(x)).collect();
            Ok(SegmentPiece {
                states,
                controls,
                lambdas,
                policies: bw.policies.clone(),
                mu: None,
                feasibility: None,
            })
        }
        SegmentSolve::Endpoint(aff) => {
            let z = &starts[j + 1];
            let nu = &link.null_coords[j];
            let residual = aff.feasibility_residual(a, z);
            let residual = if residual.is_empty() { 0.0 } else { residual.amax() };
            Ok(SegmentPiece {
                states: aff.states(a, z),
                controls: aff.controls(a, z),
                lambdas: aff.lambdas(a, z, nu),
                policies: aff.folded_policies(z),
                mu: aff.mu(a, z, nu),
                feasibility: Some(residual),
            })
        }
    }
}

/// Recomputes feedback policies on every segment but the last from the right
/// neighbour's initial cost-to-go, conditioned on the solved link states. The
/// re-passes run concurrently on `pool`.
pub fn smooth(pool: &ThreadPool, problem: &LqrProblem, par: &ParallelSolution, tol: &ToleranceSet) -> Result<Vec<AffinePolicy>> {
    let nseg = par.partition.num_segments();
    if nseg == 1 {
        return Ok(par.solution.policies.clone());
    }
    let starts: Vec<DVector<f64>> = par
        .partition
        .split_times()
        .iter()
        .map(|&t| par.solution.states[t].clone())
        .collect();
    let pieces = pool.install(|| {
        (0..nseg)
            .into_par_iter()
            .map(|j| smooth_segment(problem, par, &starts, j, tol))
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(pieces.into_iter().flatten().collect())
}

fn smooth_segment(
    problem: &LqrProblem,
    par: &ParallelSolution,
    starts: &[DVector<f64>],
    j: usize,
    tol: &ToleranceSet,
) -> Result<Vec<AffinePolicy>> {
    let range = par.partition.segment(j);
    let first = range.start;
    let stages = &problem.stages()[range];
    let Some(tail) = par.segments.get(j + 1) else {
        return match &par.segments[j] {
            SegmentSolve::Last(bw) => Ok(bw.policies.clone()),
            SegmentSolve::Endpoint(_) => unreachable!("the final segment is unconstrained"),
        };
    };
    match tail {
        SegmentSolve::Last(bw) => {
            Ok(riccati::backward_pass_stages(stages, bw.values[0].clone(), first)?.policies)
        }
        SegmentSolve::Endpoint(aff) => {
            let z = &starts[j + 2];
            let value = aff.backward.initial_value().condition(z);
            if aff.null_dim() == 0 {
                return Ok(riccati::backward_pass_stages(stages, value, first)?.policies);
            }
            // The right segment only reaches an affine subset of its start
            // states, so segment j must end on it.
            let feas = aff.backward.feasibility();
            let r = aff.null_dim();
            let constraint = TerminalConstraint::Affine {
                hx: feas.hx.rows(0, r).into_owned(),
                h1: feas.hz.rows(0, r) * z + feas.h1.rows(0, r),
            };
            let terminal = TerminalCost::new(value.vxx, value.vx1)?;
            let bw = crate::endpoint::backward_pass(stages, &terminal, &constraint, tol, BackwardOptions::default(), first)?;
            Ok(bw.policies)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqr::tests::scalar_problem;

    #[test]
    fn balanced_partitions() {
        assert_eq!(make_partition(10, 3).unwrap().split_times(), &[0, 4, 7, 10]);
        assert_eq!(make_partition(5, 1).unwrap().split_times(), &[0, 5]);
        assert_eq!(make_partition(4, 4).unwrap().split_times(), &[0, 1, 2, 3, 4]);
        assert!(make_partition(4, 5).is_err());
        assert!(make_partition(4, 0).is_err());
    }

    #[test]
    fn custom_split_times_are_checked() {
        assert!(Partition::from_split_times(vec![0, 2, 2, 5], 5).is_err());
        assert!(Partition::from_split_times(vec![0, 3], 5).is_err());
        assert!(Partition::from_split_times(vec![1, 5], 5).is_err());
        let p = Partition::from_split_times(vec![0, 1, 5], 5).unwrap();
        assert_eq!(p.segment(1), 1..5);
    }

    #[test]
    fn scalar_two_segment_link() {
        let p = scalar_problem(2, 1.0, 1.0);
        let sol = solve_parallel(&p, 2, Some(1)).unwrap();
        let link = sol.link.as_ref().unwrap();
        assert_eq!(link.matrix.dim(), 1);
        assert!((link.link_points[0][0] - 2.0 / 3.0).abs() < 1e-15);
        for u in &sol.solution.controls {
            assert!((u[0] + 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((sol.solution.objective - 1.0 / 6.0).abs() < 1e-15);
        assert!(sol.link_mismatch < 1e-15);
    }

    #[test]
    fn single_segment_is_serial() {
        let p = scalar_problem(5, 1.0, 1.0);
        let par = solve_parallel(&p, 1, Some(1)).unwrap();
        let ser = riccati::solve(&p).unwrap();
        assert_eq!(par.solution, ser);
    }

    #[test]
    fn scalar_smoothing_recovers_serial_policy() {
        let p = scalar_problem(2, 1.0, 1.0);
        let pool = build_pool(2);
        let par = solve_parallel_in(&pool, &p, &make_partition(2, 2).unwrap(), &ToleranceSet::default()).unwrap();
        let smoothed = smooth(&pool, &p, &par, &ToleranceSet::default()).unwrap();
        let serial = riccati::backward_pass(&p).unwrap();
        for (a, b) in smoothed.iter().zip(&serial.policies) {
            assert!((&a.kx - &b.kx).amax() < 1e-15);
            assert!((&a.k1 - &b.k1).amax() < 1e-15);
        }
    }

    #[test]
    fn uncontrollable_unit_segments() {
        // Fu = 0 on the middle stage makes that segment's endpoints tied.
        let p = scalar_problem(3, 1.0, 1.0);
        let mut stages = p.stages().to_vec();
        stages[1].dynamics.fu[(0, 0)] = 0.0;
        let q = LqrProblem::new(stages, p.terminal().clone(), p.x_init().clone()).unwrap();
        let par = solve_parallel(&q, 3, Some(1)).unwrap();
        let ser = riccati::solve(&q).unwrap();
        assert!(par.solution.primal_deviation(&ser) < 1e-13);
        assert!(par.solution.lambda_deviation(&ser) < 1e-13);
        assert_eq!(par.link.as_ref().unwrap().null_dims, vec![0, 1]);
        let pool = build_pool(1);
        let smoothed = smooth(&pool, &q, &par, &ToleranceSet::default()).unwrap();
        let (xs, _) = rollout(&q, &smoothed, q.x_init()).unwrap();
        for (a, b) in xs.iter().zip(&ser.states) {
            assert!((a - b).amax() < 1e-13);
        }
    }

    #[test]
    fn worker_override() {
        assert_eq!(resolve_workers(Some(3), 8), 3);
        assert!(resolve_workers(None, 1) >= 1);
    }
}
