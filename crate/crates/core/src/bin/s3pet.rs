use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use s3pet::config::ExperimentConfig;
use s3pet::gating::{Budget, SparsityMode};
use s3pet::harness::{self, BaselineKind};
use s3pet::pet::SpaceKind;
use s3pet::{Error, Result};

/// Search budgeted parameter-efficient tuning structures over a frozen
/// transformer, retrain them, and compare against baselines.
#[derive(Parser)]
#[command(name = "s3pet", version)]
struct Cli {
    /// Experiment config (JSON); built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Search and retrain seed (for `sweep`, run only this seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Parameter budget: a count such as `500`, or basis points such as `1.39‱` or `1.39bp`.
    #[arg(long, global = true)]
    budget: Option<Budget>,
    #[arg(long, global = true, value_enum)]
    space: Option<SpaceArg>,
    #[arg(long, global = true, value_enum)]
    sparsity: Option<SparsityArg>,
    /// Drop the second-order term of the structural gradient.
    #[arg(long, global = true)]
    first_order: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpaceArg {
    Mix,
    Lora,
}

#[derive(Clone, Copy, ValueEnum)]
enum SparsityArg {
    GlobalSigmoid,
    L0,
}

#[derive(Subcommand)]
enum Command {
    /// Search a structure, retrain it, and write all artifacts.
    Search,
    /// Retrain a saved structure on the configured task.
    Retrain { structure: PathBuf },
    /// Retrain a manual structure: bitfit, lnfit, lora_r1, adapter_lr or random_subset.
    Baseline { kind: BaselineKind },
    /// Search every budget, seed and mode of the sweep section (parallelism capped by S3PET_THREADS).
    Sweep,
    /// Average final keep probabilities of one or more p.csv files into a layer grid.
    Heatmap {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Run fast internal consistency checks.
    Selftest,
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.search.seed = seed;
        cfg.sweep.seeds = vec![seed];
    }
    if let Some(b) = cli.budget {
        cfg.search.budget = b;
    }
    if let Some(s) = cli.space {
        cfg.search.search_space = match s {
            SpaceArg::Mix => SpaceKind::Mix,
            SpaceArg::Lora => SpaceKind::Lora,
        };
    }
    if let Some(m) = cli.sparsity {
        let mode = match m {
            SparsityArg::GlobalSigmoid => SparsityMode::GlobalSigmoid,
            SparsityArg::L0 => SparsityMode::L0,
        };
        cfg.search.sparsity_mode = mode;
        cfg.sweep.modes = vec![mode];
    }
    if cli.first_order {
        cfg.search.first_order_only = true;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Search => print_json(&harness::run_search(&load_config(cli)?)?),
        Command::Retrain { structure } => print_json(&harness::run_retrain(structure, &load_config(cli)?)?),
        Command::Baseline { kind } => print_json(&harness::run_baseline(*kind, cli.budget, &load_config(cli)?)?),
        Command::Sweep => print_json(&harness::run_sweep(&load_config(cli)?)?.groups),
        Command::Heatmap { inputs } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("heatmap.csv"));
            let grid = harness::emit_heatmap(inputs, &out)?;
            print!("{}", grid.to_csv());
        }
        Command::Selftest => {
            let checks = harness::selftest()?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(c) = checks.iter().find(|c| !c.passed) {
                return Err(Error::Numeric(format!("selftest check '{}' failed", c.name)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
