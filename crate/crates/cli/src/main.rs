use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use avidonet::problems::ProblemId;
use avidonet_cli::config::{ExperimentConfig, PathsConfig, Preset};
use avidonet_cli::{commands, exit_code, HarnessError};
use clap::{Parser, Subcommand};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "avidonet", version, about = "Alpha-divergence variational DeepONet experiments")]
struct Cli {
    /// JSON configuration layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    /// Problem; overrides the configuration file.
    #[arg(long, global = true)]
    problem: Option<ProblemId>,
    /// Base seed; overrides the configuration file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for training and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Root directory for data, cells, results and plots.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write training, test and out-of-distribution datasets.
    Generate {
        #[arg(long)]
        force: bool,
    },
    /// Train every (alpha, seed) cell of the sweep.
    Train {
        /// Skip cells that already have a run record.
        #[arg(long)]
        resume: bool,
        /// Train only deterministic DeepONets.
        #[arg(long)]
        deterministic: bool,
    },
    /// Compute metrics and aggregate tables for the trained cells.
    Evaluate,
    /// Export plot-ready CSV files.
    Plotdata,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, cli.preset, cli.problem)?,
        None => {
            let problem = cli
                .problem
                .ok_or_else(|| HarnessError::Config("pass --problem or --config".into()))?;
            ExperimentConfig::preset(cli.preset, problem)
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &cli.out {
        cfg.paths = PathsConfig::under(root);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { force } => commands::generate(&cfg, force),
        Command::Train { resume, deterministic } => {
            commands::train(&cfg, resume, deterministic, cli.workers).map(|_| ())
        }
        Command::Evaluate => commands::evaluate(&cfg, cli.workers).map(|_| ()),
        Command::Plotdata => commands::plotdata(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
