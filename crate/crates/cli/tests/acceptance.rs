//! Acceptance suite. Run with `cargo test -p par-riccati --test acceptance`.
//! Prints one PASS/FAIL line per criterion and exits non-zero on any FAIL.
//! A criterion that needs hardware this machine lacks is reported as
//! NOT EVALUATED and does not fail the run.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use par_riccati::bench::{run_bench, BenchConfig};
use par_riccati::demo::{run_demo, DemoConfig};
use par_riccati_core::endpoint::{backward_pass, solve_endpoint, BackwardOptions, TerminalConstraint};
use par_riccati_core::generate::generate;
use par_riccati_core::kkt_oracle::solve_dense;
use par_riccati_core::lqr::kkt_residual_with_endpoint;
use par_riccati_core::parallel::{build_pool, make_partition, solve_parallel_in};
use par_riccati_core::{riccati, LqrProblem, LqrSolution, SolverError, ToleranceSet};

enum Verdict {
    Pass,
    Fail,
    NotEvaluated,
}

struct Outcome {
    id: &'static str,
    name: &'static str,
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn check(id: &'static str, name: &'static str, ok: bool, detail: String) -> Self {
        let verdict = if ok { Verdict::Pass } else { Verdict::Fail };
        Self { id, name, verdict, detail }
    }
}

struct Instance {
    problem: LqrProblem,
    dense: LqrSolution,
    scale: f64,
}

/// The 200 seeded instances shared by criteria 1, 3 and 5.
fn instances() -> Vec<Instance> {
    (0..200u64)
        .map(|seed| {
            let n = 1 + (seed % 6) as usize;
            let m = 1 + (seed / 6 % 3) as usize;
            let t = 1 + ((seed * 7 + seed / 18) % 20) as usize;
            let problem = generate(n, m, t, 10_000 + seed);
            let dense = solve_dense(&problem, None).expect("oracle solve").solution;
            let scale = 1.0 + problem.data_magnitude();
            Instance { problem, dense, scale }
        })
        .collect()
}

fn full_deviation(a: &LqrSolution, b: &LqrSolution) -> f64 {
    a.primal_deviation(b).max(a.lambda_deviation(b))
}

fn segment_counts(t: usize) -> Vec<usize> {
    let mut js: Vec<usize> = [1, 2, 3, 4, t].into_iter().filter(|&j| j <= t).collect();
    js.dedup();
    js
}

fn criterion_1_and_3(cases: &[Instance]) -> (Outcome, Outcome) {
    let start = Instant::now();
    let tol = ToleranceSet::default();
    let pool = build_pool(2);
    let mut worst_ratio: f64 = 0.0;
    let mut failures = Vec::new();
    let mut worst_link: f64 = 0.0;
    let mut links = 0usize;
    let mut non_unique = 0usize;
    for (i, c) in cases.iter().enumerate() {
        let p = &c.problem;
        let limit = 1e-8 * c.scale;
        let mut record = |what: String, dev: f64| {
            worst_ratio = worst_ratio.max(dev / limit);
            if !(dev <= limit) {
                failures.push(format!("#{i} {what}: {dev:.2e}"));
            }
        };

        match riccati::solve(p) {
            Ok(s) => record("serial".into(), full_deviation(&s, &c.dense)),
            Err(e) => record(format!("serial {e}"), f64::INFINITY),
        }

        let z = c.dense.states.last().unwrap().clone();
        match solve_endpoint(p, &z, &tol) {
            Ok(ep) => {
                record("endpoint primal".into(), ep.solution.primal_deviation(&c.dense));
                // With x_term at the free optimum the endpoint multipliers are
                // the free ones (μ = 0) whenever they are unique, which is
                // exactly when the constrained KKT matrix is nonsingular.
                // Otherwise any multiplier satisfying the KKT rows is optimal.
                match solve_dense(p, Some(&z)) {
                    Ok(dz) => {
                        record("endpoint lambda".into(), ep.solution.lambda_deviation(&dz.solution));
                        record("endpoint mu".into(), (&ep.mu - dz.mu.unwrap()).amax());
                    }
                    Err(SolverError::SingularKkt) => {
                        non_unique += 1;
                        record("endpoint kkt".into(), kkt_residual_with_endpoint(p, &ep.solution, &ep.mu, &z));
                    }
                    Err(e) => record(format!("endpoint oracle {e}"), f64::INFINITY),
                }
            }
            Err(e) => record(format!("endpoint {e}"), f64::INFINITY),
        }

        for j in segment_counts(p.horizon()) {
            let part = make_partition(p.horizon(), j).unwrap();
            match solve_parallel_in(&pool, p, &part, &tol) {
                Ok(par) => {
                    record(format!("parallel J={j}"), full_deviation(&par.solution, &c.dense));
                    if j > 1 {
                        links += j - 1;
                        worst_link = worst_link.max(par.link_mismatch);
                    }
                }
                Err(e) => record(format!("parallel J={j} {e}"), f64::INFINITY),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let c1 = Outcome::check(
        "1",
        "oracle equivalence",
        failures.is_empty() && secs < 60.0,
        format!(
            "200 instances, worst deviation {worst_ratio:.2e} of the 1e-8(1+mag) bound, {non_unique} with non-unique endpoint multipliers checked by KKT residual, {secs:.1} s{}",
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    );
    let c3 = Outcome::check(
        "3",
        "link condition",
        worst_link <= 1e-8,
        format!("{links} interior links, max |mu + lambda_right| = {worst_link:.2e} (bound 1e-8)"),
    );
    (c1, c3)
}

fn criterion_2() -> Outcome {
    match run_demo(&DemoConfig::default()) {
        Ok(out) => {
            let s = out.cost("serial", true).unwrap();
            let p = out.cost("parallel", true).unwrap();
            let sm = out.cost("smoothed", true).unwrap();
            let differ = (s - p).abs() > 1e-8 * s.abs().max(1.0);
            Outcome::check(
                "2",
                "serial/parallel identity",
                out.undisturbed_spread <= 1e-8 && differ,
                format!(
                    "undisturbed spread {:.2e} (bound 1e-8); disturbed costs serial {s:.4e}, parallel {p:.4e}, smoothed {sm:.4e}",
                    out.undisturbed_spread
                ),
            )
        }
        Err(e) => Outcome::check("2", "serial/parallel identity", false, e.to_string()),
    }
}

fn criterion_4() -> Outcome {
    let tol = ToleranceSet::default();
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for seed in 0..40u64 {
        let n = 1 + (seed % 5) as usize;
        let m = 1 + (seed % 3) as usize;
        let t = 1 + (seed % 9) as usize;
        let base = generate(n, m, t, 20_000 + seed);
        let mut stages = base.stages().to_vec();
        for st in &mut stages {
            st.dynamics.fu.fill(0.0);
        }
        let p = LqrProblem::new(stages, base.terminal().clone(), base.x_init().clone()).unwrap();
        let mut free = p.x_init().clone();
        for st in p.stages() {
            free = &st.dynamics.fx * &free + &st.dynamics.f1;
        }
        let offset = generate(n, 1, 1, 30_000 + seed).x_init() * 0.5 + DVector::from_element(n, 0.75);
        let target = &free + offset;
        let gap = (&target - &free).amax();
        match solve_endpoint(&p, &target, &tol) {
            Err(SolverError::Infeasible { residual, .. }) => {
                worst = worst.max((residual - gap).abs());
                if !((residual - gap).abs() <= 1e-9) {
                    failures.push(format!("seed {seed}: {residual:e} vs {gap:e}"));
                }
            }
            other => failures.push(format!("seed {seed}: expected Infeasible, got {:?}", other.map(|_| ()))),
        }
    }
    Outcome::check(
        "4",
        "feasibility detection",
        failures.is_empty(),
        format!(
            "40 instances with Fu = 0, max |residual - gap| = {worst:.2e} (bound 1e-9){}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join(", ")) }
        ),
    )
}

fn criterion_5(cases: &[Instance]) -> Outcome {
    let tol = ToleranceSet::default();
    let (mut basis, mut proj, mut grad): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut errors = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let p = &c.problem;
        let m = p.control_dim();
        match backward_pass(p.stages(), p.terminal(), &TerminalConstraint::Endpoint, &tol, BackwardOptions::full(), 0) {
            Ok(bw) => {
                for terms in &bw.stage_terms {
                    let (py, zw) = (terms.py(), terms.zw());
                    let eye = DMatrix::<f64>::identity(m, m);
                    basis = basis.max((py * py.transpose() + zw * zw.transpose() - eye).amax());
                    let pr = terms.split.residual_projector(terms.nu.nrows());
                    proj = proj.max((&pr * &pr - &pr).amax());
                }
            }
            Err(e) => errors.push(format!("#{i}: {e}")),
        }
        match riccati::backward_pass(p) {
            Ok(bw) => {
                for (t, v) in bw.values.iter().enumerate() {
                    let lambda = v.multiplier(&c.dense.states[t]);
                    grad = grad.max((lambda - &c.dense.lambdas[t]).amax());
                }
            }
            Err(e) => errors.push(format!("#{i}: {e}")),
        }
    }
    Outcome::check(
        "5",
        "numerical invariants",
        basis <= 1e-10 && proj <= 1e-12 && grad <= 1e-8 && errors.is_empty(),
        format!(
            "basis completeness {basis:.2e} (1e-10), projector idempotence {proj:.2e} (1e-12), value-gradient multipliers {grad:.2e} (1e-8){}",
            if errors.is_empty() { String::new() } else { format!("; {}", errors.join(", ")) }
        ),
    )
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x.ln(), b + y.ln()));
    let (mx, my) = (sx / k, sy / k);
    let num: f64 = points.iter().map(|(x, y)| (x.ln() - mx) * (y.ln() - my)).sum();
    let den: f64 = points.iter().map(|(x, _)| (x.ln() - mx).powi(2)).sum();
    num / den
}

fn criterion_6() -> (Outcome, Outcome) {
    let horizons = vec![256, 512, 1024, 2048, 4096];
    let report = run_bench(&BenchConfig {
        n: 40,
        m: 10,
        horizons: horizons.clone(),
        segments: Vec::new(),
        workers: Vec::new(),
        repeats: 10,
        seed: 0,
        kkt_cap: 0,
    });
    let points: Vec<(f64, f64)> = horizons
        .iter()
        .filter_map(|&t| report.serial_seconds(t).map(|s| (t as f64, s)))
        .collect();
    let b = if points.len() == horizons.len() { slope(&points) } else { f64::NAN };
    let times: Vec<String> = points.iter().map(|(t, s)| format!("T={t}: {s:.3e} s")).collect();
    let slope_outcome = Outcome::check(
        "6a",
        "serial scaling",
        (0.8..=1.2).contains(&b),
        format!("log-log slope {b:.3} (range [0.8, 1.2]); {}", times.join(", ")),
    );

    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let speed = run_bench(&BenchConfig {
        n: 40,
        m: 10,
        horizons: vec![2048],
        segments: vec![8],
        workers: vec![8],
        repeats: 10,
        seed: 0,
        kkt_cap: 0,
    });
    let serial = speed.serial_seconds(2048);
    let par = speed.find("parallel", 2048, 8, 8);
    let detail = match (serial, par.and_then(|r| r.seconds)) {
        (Some(s), Some(p)) => format!(
            "parallel {p:.3e} s vs serial {s:.3e} s, ratio {:.3} (bound 0.67, deviation {:.2e}); {cores} core(s) available",
            p / s,
            par.unwrap().deviation.unwrap_or(f64::NAN)
        ),
        _ => format!("bench row failed: {:?}", par.and_then(|r| r.error.clone())),
    };
    let speed_outcome = if cores < 8 {
        Outcome {
            id: "6b",
            name: "parallel speedup",
            verdict: Verdict::NotEvaluated,
            detail: format!("needs at least 8 cores; measured {detail}"),
        }
    } else {
        let ok = matches!((serial, par), (Some(s), Some(r)) if !r.failed && r.seconds.is_some_and(|p| p <= 0.67 * s));
        Outcome::check("6b", "parallel speedup", ok, detail)
    };
    (slope_outcome, speed_outcome)
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_par-riccati"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

/// CSV body with the columns named in `skip` removed.
fn body_without(path: &Path, skip: &[&str]) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let keep: Vec<usize> = (0..header.len()).filter(|&i| !skip.contains(&header[i])).collect();
    Ok(lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            keep.iter().map(|&i| f.get(i).copied().unwrap_or_default()).collect::<Vec<_>>().join(",")
        })
        .collect())
}

fn criterion_7() -> Outcome {
    let result = (|| -> Result<String, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = dir.path();
        let mut compared = Vec::new();
        for run in ["a", "b"] {
            let bench = root.join(run).join("bench.csv");
            run_cli(&[
                "bench", "--n", "6", "--m", "2", "--T", "64,128", "--J", "1,2,4,8", "--workers", "1,2", "--repeats",
                "2", "--seed", "11", "--out", bench.to_str().unwrap(),
            ])?;
            let demo = root.join(run).join("demo");
            run_cli(&["demo", "--disturbed", "--out-dir", demo.to_str().unwrap()])?;
        }
        let mut files = vec![("bench.csv".to_string(), vec!["seconds"])];
        for policy in ["serial", "parallel", "smoothed"] {
            for dynamics in ["undisturbed", "disturbed"] {
                files.push((format!("demo/{policy}_{dynamics}.csv"), vec![]));
            }
        }
        files.push(("demo/summary.csv".to_string(), vec![]));
        for (file, skip) in &files {
            let a = body_without(&root.join("a").join(file), skip)?;
            let b = body_without(&root.join("b").join(file), skip)?;
            if a != b {
                return Err(format!("{file} differs between runs"));
            }
            if a.is_empty() {
                return Err(format!("{file} is empty"));
            }
            compared.push(file.clone());
        }
        Ok(format!("{} CSV files byte-identical across two runs (bench seconds column excluded)", compared.len()))
    })();
    match result {
        Ok(detail) => Outcome::check("7", "determinism", true, detail),
        Err(e) => Outcome::check("7", "determinism", false, e),
    }
}

fn main() {
    let cases = instances();
    let (c1, c3) = criterion_1_and_3(&cases);
    let mut outcomes = vec![c1, criterion_2(), c3, criterion_4(), criterion_5(&cases)];
    let (c6a, c6b) = criterion_6();
    outcomes.extend([c6a, c6b, criterion_7()]);

    let mut failed = 0;
    for o in &outcomes {
        let tag = match o.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::NotEvaluated => "NOT EVALUATED",
        };
        println!("[{tag}] criterion {} {}: {}", o.id, o.name, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion line(s) failed");
        std::process::exit(1);
    }
}
