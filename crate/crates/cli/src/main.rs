//! `ridepool` command-line driver.
//!
//! Exit status: 0 on success, 2 when the configuration cannot be read,
//! parsed or validated, 1 for any failure after that.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use ridepool::assign::{solve, AssignmentInstance, SolveOptions};
use ridepool::roadnet::{format_edge_list, grid_edges};
use ridepool::sim::{
    evaluate, initial_trainer, train, zero_trainer, Mode, NetworkKind, RunConfig, RunSummary, Scenario,
};
use ridepool::valuefn::{load_checkpoint, save_checkpoint};
use ridepool::verify::{
    brute_force_assignment, feasibility_suite, gradient_suite, ilp_suite, rebalance_suite, replay_ratio_suite, zero_network_suite,
    SuiteReport,
};

#[derive(Parser, Debug)]
#[command(name = "ridepool", version, about = "Ride-pool dispatch simulator with a learned value function")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration. Built-in defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set timing.tau=120`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Directory for all outputs.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the configured grid as an edge-list file.
    GenNetwork {
        #[command(flatten)]
        common: Common,
    },
    /// Train the value function and write checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from an all-zero network instead of random weights.
        #[arg(long)]
        zero_init: bool,
    },
    /// Evaluate a trained checkpoint over the evaluation days.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate the myopic policy over the evaluation days.
    Baseline {
        #[command(flatten)]
        common: Common,
    },
    /// Measure per-epoch dispatch time against the epoch length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Time the learned policy from this checkpoint instead of the myopic one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the brute-force oracle suites and the zero-network check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Scale factor on the number of random cases per suite.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        /// Directory of assignment instances (`*.json`) to check against
        /// exhaustive enumeration.
        #[arg(long, default_value = "fixtures/assignment")]
        fixtures: PathBuf,
    },
}

/// Marks failures that should exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(common: &Common, mode: Mode) -> Result<RunConfig> {
    let (text, source) = match &common.config {
        Some(p) => (
            fs::read_to_string(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?,
            p.display().to_string(),
        ),
        None => (String::new(), "<defaults>".to_string()),
    };
    let mut cfg = RunConfig::from_toml_with_overrides(&text, &common.overrides).map_err(|e| {
        let msg = match e {
            ridepool::Error::Parse { path, line, msg } if path == "config" => format!("{source}:{line}: {msg}"),
            ridepool::Error::Parse { path, line, msg } => format!("{path} #{line}: {msg}"),
            other => format!("{source}: {other}"),
        };
        ConfigError(msg)
    })?;
    cfg.mode = mode;
    Ok(cfg.resolved())
}

fn scenario(cfg: RunConfig) -> Result<Scenario> {
    Scenario::new(cfg).map_err(|e| ConfigError(format!("cannot build scenario: {e}")).into())
}

fn prepare_out(common: &Common, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let text = cfg.to_toml_string()?;
    fs::write(common.out.join("resolved-config.toml"), text)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn run_evaluation(common: &Common, mode: Mode, checkpoint: Option<&Path>) -> Result<RunSummary> {
    let cfg = load_config(common, mode)?;
    let sc = scenario(cfg)?;
    let trainer = match checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    prepare_out(common, &sc.cfg)?;
    let mut metrics = create(&common.out.join("metrics.jsonl"))?;
    let mut timings = create(&common.out.join("timings.jsonl"))?;
    let summary = evaluate(
        &sc,
        trainer.as_ref().map(|t| &t.online),
        Some(&mut metrics),
        Some(&mut timings),
    )?;
    metrics.flush()?;
    timings.flush()?;
    write_json(&common.out.join("summary.json"), &summary)?;
    println!(
        "served {:.1} ± {:.1} requests, service rate {:.4} ± {:.4} over {} days",
        summary.mean_served,
        summary.sd_served,
        summary.mean_service_rate,
        summary.sd_service_rate,
        summary.rows.len()
    );
    Ok(summary)
}

#[derive(Serialize)]
struct BenchReport {
    epochs: usize,
    epoch_seconds: f64,
    mean_dispatch_ms: f64,
    p95_dispatch_ms: f64,
    max_dispatch_ms: f64,
    mean_feasibility_ms: f64,
    mean_scoring_ms: f64,
    mean_solve_ms: f64,
    mean_rebalance_ms: f64,
    within_budget: usize,
}

fn run_bench(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let mode = if checkpoint.is_some() { Mode::Evaluate } else { Mode::Baseline };
    let cfg = load_config(common, mode)?;
    let sc = scenario(cfg)?;
    let trainer = match checkpoint {
        Some(p) => Some(load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    prepare_out(common, &sc.cfg)?;
    let mut buf = Vec::new();
    evaluate(&sc, trainer.as_ref().map(|t| &t.online), None, Some(&mut buf))?;
    fs::write(common.out.join("timings.jsonl"), &buf)?;
    let rows: Vec<ridepool::sim::EpochTimings> = String::from_utf8(buf)?
        .lines()
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        bail!("no epochs were simulated");
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&ridepool::sim::EpochTimings) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mut dispatch: Vec<f64> = rows.iter().map(|t| t.dispatch_ms()).collect();
    dispatch.sort_by(f64::total_cmp);
    let budget_ms = sc.cfg.timing.epoch_seconds * 1000.0;
    let report = BenchReport {
        epochs: rows.len(),
        epoch_seconds: sc.cfg.timing.epoch_seconds,
        mean_dispatch_ms: dispatch.iter().sum::<f64>() / n,
        p95_dispatch_ms: dispatch[((n * 0.95).ceil() as usize).clamp(1, rows.len()) - 1],
        max_dispatch_ms: dispatch[rows.len() - 1],
        mean_feasibility_ms: mean(&|t| t.feasibility_ms),
        mean_scoring_ms: mean(&|t| t.scoring_ms),
        mean_solve_ms: mean(&|t| t.solve_ms),
        mean_rebalance_ms: mean(&|t| t.rebalance_ms),
        within_budget: dispatch.iter().filter(|&&d| d <= budget_ms).count(),
    };
    write_json(&common.out.join("bench.json"), &report)?;
    println!(
        "dispatch per epoch: mean {:.2} ms, p95 {:.2} ms, max {:.2} ms; {}/{} epochs within {} s",
        report.mean_dispatch_ms,
        report.p95_dispatch_ms,
        report.max_dispatch_ms,
        report.within_budget,
        report.epochs,
        report.epoch_seconds
    );
    Ok(())
}

/// Solves every stored assignment instance and compares with enumeration.
fn fixture_suite(dir: &Path) -> Result<SuiteReport> {
    let mut rep = SuiteReport {
        name: "assignment-fixtures".into(),
        cases: 0,
        failures: Vec::new(),
        statistic: 0.0,
    };
    if !dir.is_dir() {
        bail!("fixture directory {} does not exist", dir.display());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    for p in paths {
        let inst = AssignmentInstance::load(&p).with_context(|| format!("loading {}", p.display()))?;
        let got = solve(&inst, &SolveOptions::default())?;
        let (best, choice) = brute_force_assignment(&inst);
        rep.cases += 1;
        if got.objective != best || got.choice != choice {
            rep.failures.push(format!(
                "{}: solver {:?} = {}, enumeration {:?} = {}",
                p.display(),
                got.choice,
                got.objective,
                choice,
                best
            ));
        }
    }
    Ok(rep)
}

fn run_verify(common: &Common, scale: usize, fixtures: &Path) -> Result<()> {
    let cfg = load_config(common, Mode::Baseline)?;
    fs::create_dir_all(&common.out)?;
    let s = scale.max(1);
    let mut reports: Vec<SuiteReport> = vec![
        ilp_suite(100 * s, 11),
        feasibility_suite(200 * s, 12),
        gradient_suite(10 * s, 13),
        rebalance_suite(100 * s, 14),
        replay_ratio_suite(100_000 * s, 15),
    ];
    let epochs = cfg.timing.horizon.min(200);
    reports.push(zero_network_suite(&cfg, epochs)?);
    reports.push(fixture_suite(fixtures)?);
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status} {:<36} cases {:>6}  statistic {:.6e}", r.name, r.cases, r.statistic);
        for f in r.failures.iter().take(5) {
            println!("     {f}");
        }
        failed += usize::from(!r.passed());
    }
    write_json(&common.out.join("verify.json"), &reports)?;
    if failed > 0 {
        bail!("{failed} oracle suite(s) failed");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenNetwork { common } => {
            let cfg = load_config(&common, Mode::Baseline)?;
            if cfg.network.kind != NetworkKind::Grid {
                return Err(ConfigError("gen-network needs network.kind = \"grid\"".into()).into());
            }
            let n = &cfg.network;
            let (_, edges) = grid_edges(n.rows, n.cols, n.edge_seconds);
            prepare_out(&common, &cfg)?;
            let path = common.out.join("network.txt");
            fs::write(&path, format_edge_list(&edges))?;
            println!("wrote {} edges to {}", edges.len(), path.display());
        }
        Command::Train { common, zero_init } => {
            let cfg = load_config(&common, Mode::Train)?;
            let sc = scenario(cfg)?;
            prepare_out(&common, &sc.cfg)?;
            let init = if zero_init { zero_trainer(&sc)? } else { initial_trainer(&sc)? };
            if sc.cfg.training.episodes == 0 {
                save_checkpoint(&init, &common.out.join("final.ckpt"))?;
                fs::write(common.out.join("train-log.jsonl"), "")?;
                println!("no episodes configured; wrote the initial network");
                return Ok(());
            }
            let outcome = train(&sc, init, Some(&common.out))?;
            let mut w = create(&common.out.join("train-log.jsonl"))?;
            for entry in &outcome.log {
                serde_json::to_writer(&mut w, entry)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            if let Some(last) = outcome.log.last() {
                println!(
                    "trained {} episodes, {} gradient steps; last validation service rate {:.4}",
                    outcome.log.len(),
                    outcome.trainer.steps,
                    last.validation_service_rate
                );
            }
        }
        Command::Evaluate { common, checkpoint } => {
            run_evaluation(&common, Mode::Evaluate, Some(&checkpoint))?;
        }
        Command::Baseline { common } => {
            run_evaluation(&common, Mode::Baseline, None)?;
        }
        Command::Bench { common, checkpoint } => run_bench(&common, checkpoint.as_deref())?,
        Command::Verify { common, scale, fixtures } => run_verify(&common, scale, &fixtures)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(c) = e.downcast_ref::<ConfigError>() {
                eprintln!("config error: {c}");
                ExitCode::from(2)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::from(1)
            }
        }
    }
}
