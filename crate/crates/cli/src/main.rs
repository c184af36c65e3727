use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use par_riccati::bench::{run_bench, BenchConfig};
use par_riccati::demo::{run_demo, DemoConfig};
use par_riccati::io::{write_json, write_problem, write_text};
use par_riccati::solve::{solve_file, CommandError, SolverKind, EXIT_NUMERICAL};
use par_riccati_core::generate::generate;
use par_riccati_core::kkt_oracle::DEFAULT_SIZE_CAP;

#[derive(Parser)]
#[command(name = "par-riccati", version, about = "Serial and horizon-parallel Riccati solvers for time-varying LQR")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a problem file and write the solution as JSON.
    Solve {
        #[arg(long)]
        problem: PathBuf,
        #[arg(long, value_enum, default_value = "serial")]
        solver: SolverKind,
        /// Number of horizon segments for the parallel solver.
        #[arg(long = "J", default_value_t = 1)]
        segments: usize,
        /// Worker threads (default: PAR_RICCATI_WORKERS, else min(J, cores)).
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded random strictly convex problem.
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        m: usize,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Double-integrator comparison of serial, parallel and smoothed policies.
    Demo {
        #[arg(long, default_value_t = 0.02)]
        dt: f64,
        #[arg(long = "T", default_value_t = 200)]
        horizon: usize,
        /// Also roll the policies out on the disturbed dynamics.
        #[arg(long)]
        disturbed: bool,
        #[arg(long = "J", default_value_t = 3)]
        segments: usize,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value_t = 10.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1e3)]
        alpha_terminal: f64,
        #[arg(long, default_value_t = 1e-2)]
        beta: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Time the solvers and cross-check their solutions.
    Bench {
        #[arg(long, default_value_t = 40)]
        n: usize,
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long = "T", value_delimiter = ',', default_value = "1024")]
        horizons: Vec<usize>,
        #[arg(long = "J", value_delimiter = ',', default_value = "1,8")]
        segments: Vec<usize>,
        /// Worker counts; one run per count and J (default: one run at the default count).
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Largest dense KKT dimension that is still timed.
        #[arg(long, default_value_t = DEFAULT_SIZE_CAP)]
        kkt_cap: usize,
        /// CSV output path.
        #[arg(long)]
        out: PathBuf,
        /// JSON report path (default: the CSV path with a .json extension).
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), (u8, String)> {
    let fail = |e: CommandError| (e.exit_code(), e.to_string());
    match cli.command {
        Command::Solve {
            problem,
            solver,
            segments,
            workers,
            out,
        } => {
            let sol = solve_file(&problem, solver, segments, workers, &out).map_err(fail)?;
            eprintln!(
                "{}: objective {:e}, kkt residual {:.3e}, {:.3e} s",
                sol.solver, sol.objective, sol.kkt_residual, sol.seconds
            );
        }
        Command::Generate {
            n,
            m,
            horizon,
            seed,
            out,
        } => {
            if n == 0 || m == 0 || horizon == 0 {
                return Err((EXIT_NUMERICAL, "n, m and T must be at least 1".into()));
            }
            write_problem(&out, &generate(n, m, horizon, seed)).map_err(|e| fail(e.into()))?;
        }
        Command::Demo {
            dt,
            horizon,
            disturbed,
            segments,
            workers,
            alpha,
            alpha_terminal,
            beta,
            out_dir,
        } => {
            let cfg = DemoConfig {
                dt,
                horizon,
                alpha,
                alpha_terminal,
                beta,
                segments,
                workers,
                disturbed,
            };
            let out = run_demo(&cfg).map_err(|e| (EXIT_NUMERICAL, e.to_string()))?;
            out.write(&out_dir).map_err(|e| fail(e.into()))?;
            print!("{}", out.summary_csv());
            eprintln!("undisturbed spread {:.3e}", out.undisturbed_spread);
        }
        Command::Bench {
            n,
            m,
            horizons,
            segments,
            workers,
            repeats,
            seed,
            kkt_cap,
            out,
            json,
        } => {
            let cfg = BenchConfig {
                n,
                m,
                horizons,
                segments,
                workers,
                repeats,
                seed,
                kkt_cap,
            };
            let report = run_bench(&cfg);
            write_text(&out, &report.to_csv()).map_err(|e| fail(e.into()))?;
            let json = json.unwrap_or_else(|| out.with_extension("json"));
            write_json(&json, &report).map_err(|e| fail(e.into()))?;
            print!("{}", report.to_csv());
            if report.failed() {
                let bad: Vec<String> = report
                    .records
                    .iter()
                    .filter(|r| r.failed)
                    .map(|r| format!("{} T={} J={} workers={}", r.solver, r.horizon, r.segments, r.workers))
                    .collect();
                return Err((EXIT_NUMERICAL, format!("failed rows: {}", bad.join("; "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
