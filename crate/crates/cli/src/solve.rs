//! The `solve` command and its exit codes.

use std::path::Path;
use std::time::Instant;

use par_riccati_core::kkt_oracle::solve_dense;
use par_riccati_core::lqr::validate;
use par_riccati_core::parallel::{build_pool, make_partition, resolve_workers, solve_parallel_in};
use par_riccati_core::{riccati, SolverError, ToleranceSet};

use crate::io::{read_problem, write_json, IoError, SolutionFile};

pub const EXIT_OK: u8 = 0;
pub const EXIT_IO: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SolverKind {
    Serial,
    Parallel,
    Kkt,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Serial => "serial",
            Self::Parallel => "parallel",
            Self::Kkt => "kkt",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

impl CommandError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Io(IoError::Problem(e)) | Self::Solver(e) => solver_exit_code(e),
            Self::Io(_) => EXIT_IO,
            Self::Invalid(_) => EXIT_NUMERICAL,
        }
    }
}

fn solver_exit_code(e: &SolverError) -> u8 {
    match e {
        SolverError::Infeasible { .. } => EXIT_INFEASIBLE,
        SolverError::DimensionMismatch(_) => EXIT_IO,
        _ => EXIT_NUMERICAL,
    }
}

/// Reads, validates and solves the problem at `problem`, then writes the
/// solution JSON to `out`.
pub fn solve_file(
    problem: &Path,
    solver: SolverKind,
    segments: usize,
    workers: Option<usize>,
    out: &Path,
) -> Result<SolutionFile, CommandError> {
    let p = read_problem(problem)?;
    let report = validate(&p);
    if !report.is_ok() {
        return Err(CommandError::Invalid(report.to_string()));
    }
    let start = Instant::now();
    let (solution, segments, workers) = match solver {
        SolverKind::Serial => (riccati::solve(&p)?, 1, 1),
        SolverKind::Parallel => {
            let workers = resolve_workers(workers, segments);
            let partition = make_partition(p.horizon(), segments)?;
            let par = solve_parallel_in(&build_pool(workers), &p, &partition, &ToleranceSet::default())?;
            (par.solution, segments, workers)
        }
        SolverKind::Kkt => (solve_dense(&p, None)?.solution, 1, 1),
    };
    let seconds = start.elapsed().as_secs_f64();
    let file = SolutionFile::new(solver.name(), segments, workers, &solution, seconds);
    write_json(out, &file)?;
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let infeasible = SolverError::Infeasible { segment: 1, residual: 0.5 };
        assert_eq!(CommandError::Solver(infeasible).exit_code(), EXIT_INFEASIBLE);
        assert_eq!(CommandError::Solver(SolverError::CholeskyFailure { stage: 0 }).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CommandError::Solver(SolverError::LinkSingular { block: 0 }).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CommandError::Invalid("Quu".into()).exit_code(), EXIT_NUMERICAL);
        assert_eq!(CommandError::Io(IoError::Shape("x".into())).exit_code(), EXIT_IO);
        assert_eq!(EXIT_OK, 0);
    }
}
