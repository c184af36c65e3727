//! JSON problem and solution files.
//!
//! A problem file holds `n`, `m`, `T`, `x_init`, a `stages` array of `T`
//! objects with fields `Qxx, Qux, Quu, qx1, qu1, Fx, Fu, f1`, and a
//! `terminal` object with `Qxx, qx1`. Matrices are arrays of row arrays.
//! Numbers are written with round-trip precision.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use par_riccati_core::{LqrProblem, LqrSolution, SolverError, Stage, StageCost, StageDynamics, TerminalCost};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid problem file: {0}")]
    Shape(String),
    #[error("invalid problem data: {0}")]
    Problem(#[from] SolverError),
}

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct StageFile {
    pub Qxx: Rows,
    pub Qux: Rows,
    pub Quu: Rows,
    pub qx1: Vec<f64>,
    pub qu1: Vec<f64>,
    pub Fx: Rows,
    pub Fu: Rows,
    pub f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct TerminalFile {
    pub Qxx: Rows,
    pub qx1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub x_init: Vec<f64>,
    pub stages: Vec<StageFile>,
    pub terminal: TerminalFile,
}

fn rows_of(a: &DMatrix<f64>) -> Rows {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, rows: &Rows, nrows: usize, ncols: usize) -> Result<DMatrix<f64>, IoError> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(IoError::Shape(format!("{name} must be {nrows}x{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn vector(name: &str, v: &[f64], len: usize) -> Result<DVector<f64>, IoError> {
    if v.len() != len {
        return Err(IoError::Shape(format!("{name} must have length {len}, found {}", v.len())));
    }
    Ok(DVector::from_column_slice(v))
}

impl ProblemFile {
    pub fn from_problem(p: &LqrProblem) -> Self {
        let stages = p
            .stages()
            .iter()
            .map(|st| StageFile {
                Qxx: rows_of(&st.cost.qxx),
                Qux: rows_of(&st.cost.qux),
                Quu: rows_of(&st.cost.quu),
                qx1: st.cost.qx1.iter().copied().collect(),
                qu1: st.cost.qu1.iter().copied().collect(),
                Fx: rows_of(&st.dynamics.fx),
                Fu: rows_of(&st.dynamics.fu),
                f1: st.dynamics.f1.iter().copied().collect(),
            })
            .collect();
        Self {
            n: p.state_dim(),
            m: p.control_dim(),
            horizon: p.horizon(),
            x_init: p.x_init().iter().copied().collect(),
            stages,
            terminal: TerminalFile {
                Qxx: rows_of(&p.terminal().qxx),
                qx1: p.terminal().qx1.iter().copied().collect(),
            },
        }
    }

    pub fn to_problem(&self) -> Result<LqrProblem, IoError> {
        let (n, m) = (self.n, self.m);
        if self.horizon == 0 || self.stages.len() != self.horizon {
            return Err(IoError::Shape(format!(
                "T = {} but {} stages are listed",
                self.horizon,
                self.stages.len()
            )));
        }
        let mut stages = Vec::with_capacity(self.horizon);
        for (t, s) in self.stages.iter().enumerate() {
            let name = |f: &str| format!("stages[{t}].{f}");
            let cost = StageCost::new(
                matrix(&name("Qxx"), &s.Qxx, n, n)?,
                matrix(&name("Qux"), &s.Qux, m, n)?,
                matrix(&name("Quu"), &s.Quu, m, m)?,
                vector(&name("qx1"), &s.qx1, n)?,
                vector(&name("qu1"), &s.qu1, m)?,
            )?;
            let dynamics = StageDynamics::new(
                matrix(&name("Fx"), &s.Fx, n, n)?,
                matrix(&name("Fu"), &s.Fu, n, m)?,
                vector(&name("f1"), &s.f1, n)?,
            )?;
            stages.push(Stage { cost, dynamics });
        }
        let terminal = TerminalCost::new(
            matrix("terminal.Qxx", &self.terminal.Qxx, n, n)?,
            vector("terminal.qx1", &self.terminal.qx1, n)?,
        )?;
        Ok(LqrProblem::new(stages, terminal, vector("x_init", &self.x_init, n)?)?)
    }
}

pub fn read_problem(path: &Path) -> Result<LqrProblem, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read { path: path.into(), source })?;
    let file: ProblemFile =
        serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.into(), source })?;
    file.to_problem()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json { path: path.into(), source })?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Write { path: dir.into(), source })?;
    }
    fs::write(path, text).map_err(|source| IoError::Write { path: path.into(), source })
}

pub fn write_problem(path: &Path, p: &LqrProblem) -> Result<(), IoError> {
    write_json(path, &ProblemFile::from_problem(p))
}

/// Solution JSON written by `solve`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionFile {
    pub solver: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub segments: usize,
    pub workers: usize,
    pub states: Rows,
    pub controls: Rows,
    pub multipliers: Rows,
    pub objective: f64,
    pub kkt_residual: f64,
    pub seconds: f64,
}

impl SolutionFile {
    pub fn new(solver: &str, segments: usize, workers: usize, sol: &LqrSolution, seconds: f64) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect()).collect();
        Self {
            solver: solver.to_string(),
            n: sol.states[0].len(),
            m: sol.controls.first().map_or(0, |u| u.len()),
            horizon: sol.controls.len(),
            segments,
            workers,
            states: rows(&sol.states),
            controls: rows(&sol.controls),
            multipliers: rows(&sol.lambdas),
            objective: sol.objective,
            kkt_residual: sol.kkt_residual_inf,
            seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use par_riccati_core::generate::generate;

    #[test]
    fn problem_round_trips_bit_exactly() {
        let p = generate(3, 2, 4, 7);
        let file = ProblemFile::from_problem(&p);
        let text = serde_json::to_string(&file).unwrap();
        let back: ProblemFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(ProblemFile::from_problem(&back.to_problem().unwrap()), file);
    }

    #[test]
    fn field_names_follow_the_file_format() {
        let p = generate(1, 1, 1, 0);
        let v = serde_json::to_value(ProblemFile::from_problem(&p)).unwrap();
        for key in ["n", "m", "T", "x_init", "stages", "terminal"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        for key in ["Qxx", "Qux", "Quu", "qx1", "qu1", "Fx", "Fu", "f1"] {
            assert!(v["stages"][0].get(key).is_some(), "{key}");
        }
        assert!(v["terminal"]["Qxx"][0].is_array());
    }

    #[test]
    fn wrong_shapes_are_reported() {
        let mut f = ProblemFile::from_problem(&generate(2, 1, 2, 0));
        f.stages[1].Fu = vec![vec![1.0, 2.0]];
        let err = f.to_problem().unwrap_err().to_string();
        assert!(err.contains("stages[1].Fu must be 2x1"), "{err}");
        f = ProblemFile::from_problem(&generate(2, 1, 2, 0));
        f.horizon = 3;
        assert!(matches!(f.to_problem(), Err(IoError::Shape(_))));
    }
}
