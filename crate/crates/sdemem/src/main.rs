use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sdemem::commands::{cmd_diagnose, cmd_run, cmd_simulate, cmd_tune, StdClock};
use sdemem::config::{parse_override, read_pairs, RunConfig, KEYS};
use sdemem::error::{AppError, Result};

#[derive(Parser)]
#[command(name = "sdemem", version, about = "Bayesian inference for SDE mixed-effects models")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-subject work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Model: constant or tumour.
    #[arg(long)]
    model: Option<String>,
    /// Any configuration key, as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct Sim {
    /// True parameters, comma-separated in layout order.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<String>,
    /// Number of subjects.
    #[arg(long)]
    subjects: Option<usize>,
    /// Hours between observations.
    #[arg(long)]
    hours: Option<f64>,
    /// Study length in days.
    #[arg(long)]
    days: Option<f64>,
}

#[derive(Args)]
struct Inference {
    /// Dataset CSV (subject,time,y).
    #[arg(long)]
    data: Option<PathBuf>,
    /// iapm, cwpm or mpm.
    #[arg(long)]
    method: Option<String>,
    /// Block-correlated random numbers.
    #[arg(long)]
    correlated: bool,
    /// Particle proposal: emd, mdb or rb.
    #[arg(long)]
    proposal: Option<String>,
    /// Particles per filter.
    #[arg(long)]
    particles: Option<usize>,
    /// MCMC iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Starting parameters, comma-separated in layout order.
    #[arg(long, allow_hyphen_values = true)]
    init: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset into <out>/data.csv.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
    },
    /// Tune the particle count by the σ_Δ criterion; writes <out>/tuning.txt.
    Tune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
        #[command(flatten)]
        inference: Inference,
    },
    /// Run an MCMC chain; writes trace.csv and report.txt under <out>.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: Sim,
        #[command(flatten)]
        inference: Inference,
    },
    /// Recompute diagnostics and density grids for a trace file.
    Diagnose {
        /// Trace CSV written by `run`.
        trace: PathBuf,
    },
    /// List configuration keys.
    Keys,
}

fn push(pairs: &mut Vec<(String, String)>, key: &str, value: Option<String>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v));
    }
}

fn build_config(cli: &Cli, common: &Common, sim: &Sim, inference: Option<&Inference>) -> Result<RunConfig> {
    let mut pairs = match &cli.config {
        Some(path) => read_pairs(path)?,
        None => Vec::new(),
    };
    push(&mut pairs, "model", common.model.clone());
    push(&mut pairs, "sim_theta", sim.theta.clone());
    push(&mut pairs, "sim_subjects", sim.subjects.map(|x| x.to_string()));
    push(&mut pairs, "sim_hours", sim.hours.map(|x| x.to_string()));
    push(&mut pairs, "sim_days", sim.days.map(|x| x.to_string()));
    if let Some(inf) = inference {
        push(&mut pairs, "data", inf.data.as_ref().map(|p| p.display().to_string()));
        push(&mut pairs, "method", inf.method.clone());
        push(&mut pairs, "correlated", inf.correlated.then(|| "true".to_string()));
        push(&mut pairs, "proposal", inf.proposal.clone());
        push(&mut pairs, "particles", inf.particles.map(|x| x.to_string()));
        push(&mut pairs, "iterations", inf.iterations.map(|x| x.to_string()));
        push(&mut pairs, "init", inf.init.clone());
    }
    for s in &common.set {
        pairs.push(parse_override(s)?);
    }
    push(&mut pairs, "seed", cli.seed.map(|x| x.to_string()));
    push(&mut pairs, "out", cli.out.as_ref().map(|p| p.display().to_string()));
    push(&mut pairs, "threads", cli.threads.map(|x| x.to_string()));
    RunConfig::from_pairs(&pairs)
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    let Some(n) = threads else { return Ok(()) };
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| AppError::Config(format!("threads: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        eprintln!("warning: built without the parallel feature; running on one thread");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let clock = StdClock::new();
    match &cli.command {
        Command::Simulate { common, sim } => {
            let cfg = build_config(&cli, common, sim, None)?;
            let path = cmd_simulate(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Tune { common, sim, inference } => {
            let cfg = build_config(&cli, common, sim, Some(inference))?;
            configure_threads(cfg.threads)?;
            let report = cmd_tune(&cfg, &clock)?;
            println!("selected N = {}", report.selected.unwrap_or(0));
        }
        Command::Run { common, sim, inference } => {
            let cfg = build_config(&cli, common, sim, Some(inference))?;
            configure_threads(cfg.threads)?;
            let out = cmd_run(&cfg, &clock)?;
            print!("{}", sdemem::report::run_report_text(&out.report));
        }
        Command::Diagnose { trace } => {
            configure_threads(cli.threads)?;
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            let report = cmd_diagnose(trace, &out)?;
            print!("{}", sdemem::report::run_report_text(&report));
        }
        Command::Keys => {
            for (k, d) in KEYS {
                println!("{k:20} {d}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", AppError::Config(first).line());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
