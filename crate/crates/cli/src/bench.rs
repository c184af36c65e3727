//! Timing benchmarks with cross-solver checks.
//!
//! For every horizon the serial Riccati solve is the reference. Each
//! parallel configuration and, when it fits under the size cap, the dense
//! KKT solve are compared against it. Every configuration runs once per
//! round for `repeats` rounds and keeps its fastest time.

use std::fmt::Write as _;
use std::time::Instant;

use par_riccati_core::generate::generate;
use par_riccati_core::kkt_oracle::{solve_dense_with_cap, KktLayout, DEFAULT_SIZE_CAP};
use par_riccati_core::parallel::{build_pool, make_partition, resolve_workers, solve_parallel_in};
use par_riccati_core::{riccati, LqrSolution, Result as SolveResult, ToleranceSet};
use serde::Serialize;

/// Deviations above this mark a row as failed.
pub const DEVIATION_LIMIT: f64 = 1e-8;

pub const CSV_HEADER: &str = "n,m,T,J,workers,solver,seconds,deviation";

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n: usize,
    pub m: usize,
    pub horizons: Vec<usize>,
    pub segments: Vec<usize>,
    /// Empty means one run per `J` with the default worker count.
    pub workers: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    pub kkt_cap: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n: 40,
            m: 10,
            horizons: vec![1024],
            segments: vec![1, 8],
            workers: Vec::new(),
            repeats: 10,
            seed: 0,
            kkt_cap: DEFAULT_SIZE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub solver: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(rename = "J")]
    pub segments: usize,
    pub workers: usize,
    pub seconds: Option<f64>,
    /// Max state or control deviation from the serial solution (for the
    /// serial row: from the dense solution, when one was computed).
    pub deviation: Option<f64>,
    pub failed: bool,
    pub error: Option<String>,
}

impl BenchRecord {
    fn csv_fields(&self) -> [String; 8] {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:e}"));
        [
            self.n.to_string(),
            self.m.to_string(),
            self.horizon.to_string(),
            self.segments.to_string(),
            self.workers.to_string(),
            self.solver.clone(),
            opt(self.seconds),
            opt(self.deviation),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Environment {
    pub cores: usize,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub environment: Environment,
    pub repeats: usize,
    pub seed: u64,
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn failed(&self) -> bool {
        self.records.iter().any(|r| r.failed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.records {
            writeln!(s, "{}", r.csv_fields().join(",")).unwrap();
        }
        s
    }

    pub fn serial_seconds(&self, horizon: usize) -> Option<f64> {
        self.find("serial", horizon, 1, 1).and_then(|r| r.seconds)
    }

    pub fn find(&self, solver: &str, horizon: usize, segments: usize, workers: usize) -> Option<&BenchRecord> {
        self.records
            .iter()
            .find(|r| r.solver == solver && r.horizon == horizon && r.segments == segments && r.workers == workers)
    }
}

fn deviation(a: &LqrSolution, b: &LqrSolution) -> f64 {
    a.primal_deviation(b)
}

/// One timed configuration. Its solve closure is called once per round.
struct Job<'a> {
    record: BenchRecord,
    horizon_index: usize,
    run: Box<dyn FnMut() -> SolveResult<LqrSolution> + 'a>,
    best: f64,
    output: Option<SolveResult<LqrSolution>>,
}

impl<'a> Job<'a> {
    fn new(record: BenchRecord, horizon_index: usize, run: impl FnMut() -> SolveResult<LqrSolution> + 'a) -> Self {
        Self {
            record,
            horizon_index,
            run: Box::new(run),
            best: f64::INFINITY,
            output: None,
        }
    }
}

pub fn run_bench(cfg: &BenchConfig) -> BenchReport {
    let tol = ToleranceSet::default();
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let repeats = cfg.repeats.max(1);
    let problems: Vec<_> = cfg.horizons.iter().map(|&t| generate(cfg.n, cfg.m, t, cfg.seed)).collect();
    let mut counts: Vec<usize> = Vec::new();
    for &segments in &cfg.segments {
        if cfg.workers.is_empty() {
            counts.push(resolve_workers(None, segments));
        } else {
            counts.extend(&cfg.workers);
        }
    }
    counts.sort_unstable();
    counts.dedup();
    let pools: Vec<_> = counts.iter().map(|&w| (w, build_pool(w))).collect();
    let pool_for = |w: usize| &pools.iter().find(|(c, _)| *c == w).expect("pool built for every count").1;

    let mut jobs: Vec<Job> = Vec::new();
    for (hi, (&horizon, problem)) in cfg.horizons.iter().zip(&problems).enumerate() {
        let base = |solver: &str, segments: usize, workers: usize| BenchRecord {
            solver: solver.to_string(),
            n: cfg.n,
            m: cfg.m,
            horizon,
            segments,
            workers,
            seconds: None,
            deviation: None,
            failed: false,
            error: None,
        };
        jobs.push(Job::new(base("serial", 1, 1), hi, move || riccati::solve(problem)));
        for &segments in &cfg.segments {
            let worker_counts = if cfg.workers.is_empty() {
                vec![resolve_workers(None, segments)]
            } else {
                cfg.workers.clone()
            };
            for workers in worker_counts {
                let pool = pool_for(workers);
                let tol = &tol;
                let partition = make_partition(horizon, segments);
                jobs.push(Job::new(base("parallel", segments, workers), hi, move || {
                    let partition = partition.clone()?;
                    Ok(solve_parallel_in(pool, problem, &partition, tol)?.solution)
                }));
            }
        }
        let layout = KktLayout {
            n: cfg.n,
            m: cfg.m,
            horizon,
            terminal_constraint: false,
        };
        if layout.dim() <= cfg.kkt_cap {
            let cap = cfg.kkt_cap;
            jobs.push(Job::new(base("kkt", 1, 1), hi, move || {
                Ok(solve_dense_with_cap(problem, None, cap)?.solution)
            }));
        }
    }

    // Round-robin so that drifts in machine speed hit every configuration
    // alike; a configuration that fails is not retried.
    for _ in 0..repeats {
        for job in &mut jobs {
            if matches!(job.output, Some(Err(_))) {
                continue;
            }
            let start = Instant::now();
            let out = (job.run)();
            let secs = start.elapsed().as_secs_f64();
            if out.is_ok() {
                job.best = job.best.min(secs);
            }
            job.output = Some(out);
        }
    }

    let mut records = Vec::with_capacity(jobs.len());
    let mut serial_of = vec![0; cfg.horizons.len()];
    for (i, job) in jobs.iter().enumerate() {
        let mut r = job.record.clone();
        match job.output.as_ref().expect("every job ran") {
            Err(e) => {
                r.failed = true;
                r.error = Some(e.to_string());
            }
            Ok(sol) => {
                r.seconds = Some(job.best);
                if r.solver == "serial" {
                    serial_of[job.horizon_index] = i;
                } else {
                    let reference = jobs[serial_of[job.horizon_index]].output.as_ref().expect("serial ran first");
                    let dev = reference.as_ref().ok().map(|s| deviation(sol, s));
                    r.deviation = dev;
                    r.failed = dev.is_none_or(|d| !(d <= DEVIATION_LIMIT));
                }
            }
        }
        records.push(r);
    }
    // The serial row carries its deviation from the dense solution.
    for (i, job) in jobs.iter().enumerate() {
        if job.record.solver == "kkt" {
            if let Some(d) = records[i].deviation {
                let serial_row = &mut records[serial_of[job.horizon_index]];
                serial_row.deviation = Some(d);
                serial_row.failed |= !(d <= DEVIATION_LIMIT);
            }
        }
    }
    BenchReport {
        environment: Environment {
            cores,
            note: format!("{cores} core(s) available; times are the minimum over {repeats} interleaved run(s)"),
        },
        repeats,
        seed: cfg.seed,
        records,
    }
}
