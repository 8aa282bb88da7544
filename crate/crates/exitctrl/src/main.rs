//! Batch front end: ingests problem/config documents, runs the solvers and
//! checks, persists results under an output directory, and emits plot-ready
//! tables.
//!
//! Exit codes: 0 success, 1 check failure (verify/xval), 2 config error,
//! 3 runtime numerical error.

use clap::{Parser, Subcommand};
use exitctrl::bsde::{cost, default_candidates, estimate_value};
use exitctrl::error::Error;
use exitctrl::hjb::{extract_policy, solve_hjb, GridConfig};
use exitctrl::paths::{simulate, ExitMode, Policy, SimConfig};
use exitctrl::problem::{parse_problem_spec, serialize_problem, ControlProblem, ProbeConfig};
use exitctrl::regression::RegressionConfig;
use exitctrl::report::{emit_report, report_table, write_json, RunWriter};
use exitctrl::verify::{run_suite, SuiteConfig};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "exitctrl", version, about = "Stochastic exit-time control toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, clap::Args)]
struct CommonArgs {
    /// Path to the JSON configuration document.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (manifest, summaries, tables).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Initial state override as comma-separated coordinates.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    x0: Option<Vec<f64>>,
    /// Path count override.
    #[arg(long)]
    paths: Option<usize>,
    /// Time-step override.
    #[arg(long)]
    dt: Option<f64>,
    /// Grid nodes per axis override, comma-separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    grid: Option<Vec<usize>>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a path bundle and export the exit table.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Constant-policy control index.
        #[arg(long, default_value_t = 0)]
        control: usize,
    },
    /// Cost functional J(x0, policy) for one constant policy.
    Cost {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0)]
        control: usize,
    },
    /// Value estimate: minimum cost over candidate policies (constants
    /// plus the FD feedback policy).
    Value {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Finite-difference HJB solve; exports the value field.
    Hjb {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the theorem-check suite; exit code 1 if any check fails.
    Verify {
        #[command(flatten)]
        common: CommonArgs,
        /// Suite selection: all, dpp, holder, comparison, stability,
        /// supermartingale, expansion-chain, xval, exit-moments.
        #[arg(long, default_value = "all", value_delimiter = ',', num_args = 1..)]
        suite: Vec<String>,
    },
    /// Cross-validate the Monte Carlo value against the FD field.
    Xval {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Merge manifests under a directory into a consolidated report.
    Report {
        /// Directory containing run subdirectories.
        dir: PathBuf,
    },
}

/// Configuration document: a problem plus optional per-module settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct FileConfig {
    problem: serde_json::Value,
    #[serde(default)]
    sim: Option<SimConfig>,
    #[serde(default)]
    regression: Option<RegressionConfig>,
    #[serde(default)]
    grid: Option<GridConfig>,
    #[serde(default)]
    probe: Option<ProbeConfig>,
    #[serde(default)]
    x0: Option<Vec<f64>>,
    #[serde(default)]
    verify: Option<SuiteConfig>,
}

struct Resolved {
    problem: ControlProblem,
    sim: SimConfig,
    regression: RegressionConfig,
    grid: GridConfig,
    probe: ProbeConfig,
    x0: Vec<f64>,
    suite: SuiteConfig,
    /// Canonical serialization of everything above (the digest input).
    canonical: String,
}

fn default_sim() -> SimConfig {
    SimConfig {
        dt: 1e-3,
        t_max: 10.0,
        n_paths: 20_000,
        master_seed: 1,
        exit_correction: ExitMode::BridgeCorrected,
    }
}

fn resolve(common: &CommonArgs) -> Result<Resolved, Error> {
    let text = std::fs::read_to_string(&common.config)?;
    let file: FileConfig = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: format!("$ (line {}, column {})", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let problem = parse_problem_spec(&file.problem.to_string())?;
    let mut sim = file.sim.unwrap_or_else(default_sim);
    let regression = file.regression.unwrap_or_default();
    let mut grid = file.grid.unwrap_or_else(|| GridConfig {
        nodes_per_axis: vec![201; problem.dim_x],
        ..GridConfig::default()
    });
    let probe = file.probe.unwrap_or_default();
    let mut x0 = file.x0.unwrap_or_else(|| problem.domain.center());
    let suite = file.verify.unwrap_or_default();

    if let Some(seed) = common.seed {
        sim.master_seed = seed;
    }
    if let Some(paths) = common.paths {
        sim.n_paths = paths;
    }
    if let Some(dt) = common.dt {
        sim.dt = dt;
    }
    if let Some(nodes) = &common.grid {
        grid.nodes_per_axis = nodes.clone();
    }
    if let Some(x) = &common.x0 {
        x0 = x.clone();
    }

    let canonical = serde_json::to_string_pretty(&serde_json::json!({
        "problem": serde_json::from_str::<serde_json::Value>(&serialize_problem(&problem))?,
        "sim": sim,
        "regression": regression,
        "grid": grid,
        "probe": probe,
        "x0": x0,
        "verify": suite,
    }))?;

    Ok(Resolved {
        problem,
        sim,
        regression,
        grid,
        probe,
        x0,
        suite,
        canonical,
    })
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Schema { .. }
        | Error::DimensionMismatch { .. }
        | Error::UnknownCatalog(_)
        | Error::InvalidExpr { .. }
        | Error::Config(_)
        | Error::Json(_) => 2,
        _ => 3,
    }
}

fn main() {
    // Worker cap; results are independent of its value by contract (all
    // randomness is counter-based and reductions have fixed order).
    if let Ok(threads) = std::env::var("EXITCTRL_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}

fn run(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Simulate { common, control } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "simulate", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let bundle = simulate(
                &r.problem,
                &Policy::Constant { index: control },
                &r.x0,
                &r.sim,
            )?;
            w.record_stage("simulate", t.elapsed());
            let mut csv = Vec::new();
            bundle.export_exits_csv(&mut csv)?;
            w.add_text("exits.csv", &String::from_utf8_lossy(&csv))?;
            let taus: Vec<f64> = bundle.exits.iter().map(|e| e.tau).collect();
            let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
            w.add_json(
                "summary.json",
                &serde_json::json!({
                    "n_paths": bundle.n_paths(),
                    "mean_tau": mean_tau,
                    "censored_fraction": bundle.censored_fraction(),
                    "n_steps": bundle.n_steps,
                }),
            )?;
            w.finish()?;
            Ok(0)
        }
        Command::Cost { common, control } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "cost", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let est = cost(
                &r.problem,
                &Policy::Constant { index: control },
                &r.x0,
                &r.sim,
                &r.regression,
            )?;
            w.record_stage("cost", t.elapsed());
            w.add_json(
                "summary.json",
                &serde_json::json!({
                    "y0": est.value,
                    "stderr": est.stderr,
                    "censored_fraction": est.censored_fraction,
                    "n_paths": est.n_paths,
                    "config": { "sim": r.sim, "regression": r.regression, "x0": r.x0,
                                 "control": control },
                }),
            )?;
            println!("J(x0) = {} +- {}", est.value, est.stderr);
            w.finish()?;
            Ok(0)
        }
        Command::Value { common } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "value", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let field = solve_hjb(&r.problem, &r.grid)?;
            w.record_stage("hjb", t.elapsed());
            let t = Instant::now();
            let candidates = default_candidates(&r.problem, Some(extract_policy(&field)));
            let est = estimate_value(&r.problem, &r.x0, &candidates, &r.sim, &r.regression)?;
            w.record_stage("value", t.elapsed());
            w.add_json("summary.json", &est)?;
            println!(
                "u_hat(x0) = {} +- {} (argmin: {})",
                est.value, est.stderr, est.candidates[est.argmin].label
            );
            w.finish()?;
            Ok(0)
        }
        Command::Hjb { common } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "hjb", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let field = solve_hjb(&r.problem, &r.grid)?;
            w.record_stage("hjb", t.elapsed());
            let mut csv = Vec::new();
            field.export_csv(&mut csv)?;
            w.add_text("field.csv", &String::from_utf8_lossy(&csv))?;
            w.add_json("summary.json", &field.summary())?;
            println!(
                "solved: {} nodes, sup residual {:.3e}, {} sweeps",
                field.n_nodes(),
                field.sup_residual,
                field.sweeps
            );
            w.finish()?;
            Ok(0)
        }
        Command::Verify { common, suite } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "verify", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let reports = run_suite(
                &r.problem,
                &suite,
                &r.x0,
                &r.sim,
                &r.regression,
                &r.grid,
                &r.probe,
                &r.suite,
            )?;
            w.record_stage("verify", t.elapsed());
            w.add_json("report.json", &reports)?;
            let table = report_table(&reports);
            w.add_text("report.txt", &table)?;
            print!("{table}");
            w.finish()?;
            Ok(if reports.iter().any(|r| r.failed()) { 1 } else { 0 })
        }
        Command::Xval { common } => {
            let r = resolve(&common)?;
            let mut w = RunWriter::create(&common.out, "xval", &r.canonical, r.sim.master_seed)?;
            let t = Instant::now();
            let reports = run_suite(
                &r.problem,
                &["xval".to_string()],
                &r.x0,
                &r.sim,
                &r.regression,
                &r.grid,
                &r.probe,
                &r.suite,
            )?;
            w.record_stage("xval", t.elapsed());
            w.add_json("report.json", &reports)?;
            let table = report_table(&reports);
            w.add_text("report.txt", &table)?;
            print!("{table}");
            w.finish()?;
            Ok(if reports.iter().any(|r| r.failed()) { 1 } else { 0 })
        }
        Command::Report { dir } => {
            let merged = emit_report(&dir)?;
            write_json(&dir.join("merged_report.json"), &merged)?;
            println!(
                "merged {} run(s) into {}",
                merged.entries.len(),
                dir.join("merged_report.json").display()
            );
            Ok(0)
        }
    }
}
