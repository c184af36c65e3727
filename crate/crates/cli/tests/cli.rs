use std::path::Path;
use std::process::{Command, Output};

use par_riccati::io::{ProblemFile, SolutionFile};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_par-riccati")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_solution(p: &Path) -> SolutionFile {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn generate_then_solve_serially() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("p.json");
    let out = dir.path().join("s.json");
    assert!(run(&["generate", "--n", "3", "--m", "2", "--T", "12", "--seed", "4", "--out", path(&prob)]).status.success());
    let o = run(&["solve", "--problem", path(&prob), "--solver", "serial", "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let sol = read_solution(&out);
    assert_eq!((sol.n, sol.m, sol.horizon), (3, 2, 12));
    assert_eq!(sol.states.len(), 13);
    assert_eq!(sol.multipliers.len(), 13);
    assert!(sol.kkt_residual < 1e-8);
}

#[test]
fn generated_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        assert!(run(&["generate", "--n", "2", "--m", "1", "--T", "5", "--seed", "42", "--out", path(p)]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn solvers_agree_on_the_objective() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("p.json");
    assert!(run(&["generate", "--n", "4", "--m", "2", "--T", "16", "--seed", "9", "--out", path(&prob)]).status.success());
    let mut objectives = Vec::new();
    for (solver, j) in [("serial", "1"), ("parallel", "4"), ("kkt", "1")] {
        let out = dir.path().join(format!("{solver}.json"));
        let o = run(&["solve", "--problem", path(&prob), "--solver", solver, "--J", j, "--workers", "2", "--out", path(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        objectives.push(read_solution(&out).objective);
    }
    for o in &objectives[1..] {
        assert!((o - objectives[0]).abs() <= 1e-10 * objectives[0].abs().max(1.0), "{objectives:?}");
    }
    let par = read_solution(&dir.path().join("parallel.json"));
    assert_eq!((par.segments, par.workers), (4, 2));
}

#[test]
fn indefinite_control_weight_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let prob = dir.path().join("p.json");
    let gen = par_riccati_core::generate::generate(2, 1, 3, 1);
    let mut file = ProblemFile::from_problem(&gen);
    file.stages[1].Quu = vec![vec![0.0]];
    std::fs::write(&prob, serde_json::to_string(&file).unwrap()).unwrap();
    let o = run(&["solve", "--problem", path(&prob), "--out", path(&dir.path().join("s.json"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Quu not positive-definite at stage 1"));
}

#[test]
fn unreadable_input_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.json");
    let o = run(&["solve", "--problem", path(&dir.path().join("missing.json")), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n\": 1").unwrap();
    assert_eq!(run(&["solve", "--problem", path(&bad), "--out", path(&out)]).status.code(), Some(1));
}

#[test]
fn demo_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["demo", "--disturbed", "--T", "60", "--out-dir", path(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for policy in ["serial", "parallel", "smoothed"] {
        for dynamics in ["undisturbed", "disturbed"] {
            let text = std::fs::read_to_string(dir.path().join(format!("{policy}_{dynamics}.csv"))).unwrap();
            assert_eq!(text.lines().next(), Some("t,x1,x2,u1"));
            assert_eq!(text.lines().count(), 62);
        }
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("dynamics,cost_serial,cost_parallel,cost_smoothed"));
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn bench_writes_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = run(&["bench", "--n", "3", "--m", "1", "--T", "8,16", "--J", "1,2", "--workers", "1", "--repeats", "1", "--out", path(&csv)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("n,m,T,J,workers,solver,seconds,deviation"));
    assert_eq!(text.lines().count(), 1 + 2 * 4);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!(json["environment"]["cores"].as_u64().unwrap() >= 1);
    assert_eq!(json["records"].as_array().unwrap().len(), 8);
}

#[test]
fn bench_failure_sets_the_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["bench", "--n", "2", "--m", "1", "--T", "3", "--J", "5", "--workers", "1", "--repeats", "1", "--out", path(&dir.path().join("b.csv"))]);
    assert_eq!(o.status.code(), Some(3));
}
