use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sparsetrain::harness::config::ExperimentConfig;
use sparsetrain::harness::{cluster, edit, grad_check, scaling, spike, train};
use sparsetrain::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsetrain", version, about = "Deterministic MoE training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Analytic versus finite-difference gradients on small instances.
    GradCheck,
    /// Single-worker training.
    Train,
    /// Multi-worker EDiT training plus the synchronous baseline.
    EditTrain,
    /// Clean, unguarded and guarded runs with one poisoned batch.
    InjectSpike,
    /// Heterogeneous-cluster throughput simulation and straggler sweep.
    SimulateCluster,
    /// Power-law and loss-curve fits with the efficiency lever.
    FitScaling,
    /// Device cost of two training scenarios.
    Cost,
    /// Prints the default config as TOML.
    DefaultConfig,
}

fn emit<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let dir = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    cfg.validate()?;
    if let Command::DefaultConfig = cli.command {
        print!("{}", ExperimentConfig::default().to_toml()?);
        return Ok(());
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    match cli.command {
        Command::GradCheck => {
            let report = grad_check::run_grad_check(&cfg.grad_check, cfg.seed, None)?;
            train::write_json(&dir.join("grad_check.json"), &report)?;
            emit(&report)?;
            grad_check::report_failures(&report)
        }
        Command::Train => emit(&train::run_training(&cfg, &dir)?),
        Command::EditTrain => emit(&edit::run_edit_training(&cfg, &dir, cfg.fault.as_ref())?),
        Command::InjectSpike => emit(&spike::run_spike_scenario(&cfg, &dir)?),
        Command::SimulateCluster => emit(&cluster::run_cluster_simulation(&cfg, &dir)?),
        Command::FitScaling => emit(&scaling::run_scaling_fit(&cfg, &dir)?),
        Command::Cost => emit(&cluster::run_cost(&cfg, &dir)?),
        Command::DefaultConfig => Ok(()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{report}");
            match e {
                Error::Oracle(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
