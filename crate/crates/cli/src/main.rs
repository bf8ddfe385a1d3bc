//! Experiment runner for resolution-aware grid CNNs.
//!
//! Every subcommand reads one strict JSON config (documented by the schema
//! files in `schemas/`) and writes CSV/SVG/PGM artifacts into an output
//! directory. Exit codes: 0 success, 1 trend-gate failure, 2 config or
//! execution error. Identical config + seed gives byte-identical CSV output.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridcnn::Result;

#[derive(Parser)]
#[command(name = "gridcnn", version, about = "Resolution-aware CNN experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Path to the JSON config for the chosen subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the command's primary seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweep commands.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic circle dataset (manifest + images).
    GenData,
    /// Train a denoiser and report held-out regularity diagnostics.
    Train,
    /// Train at several weight-decay levels and summarize the smoothing trend.
    SweepWd,
    /// Train refined instantiations with compensated decay and compare.
    SweepRes,
    /// Evaluate one function-space network across a refinement ladder.
    Convergence,
    /// Fit an untrained generator to a single noisy image.
    Dip,
    /// Finite-difference check of the reverse-mode gradients.
    GradCheck,
}

fn run(cli: &Cli) -> Result<bool> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| gridcnn::Error::Config("--config is required".into()))?;
    match cli.command {
        Command::GenData => {
            let mut c: config::GenDataConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            commands::gen_data(&c, &commands::out_dir(&cli.out, &c.out_dir))
        }
        Command::Train => {
            let mut c: config::TrainCommandConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.train.seed = s;
            }
            commands::train(&c, &commands::out_dir(&cli.out, &c.out_dir))
        }
        Command::SweepWd => {
            let mut c: config::SweepWdConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.train.seed = s;
            }
            commands::sweep_wd(&c, &commands::out_dir(&cli.out, &c.out_dir), cli.threads)
        }
        Command::SweepRes => {
            let mut c: config::SweepResConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.train.seed = s;
            }
            commands::sweep_res(&c, &commands::out_dir(&cli.out, &c.out_dir), cli.threads)
        }
        Command::Convergence => {
            let mut c: config::ConvergenceConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.init_seed = Some(s);
            }
            commands::convergence(&c, &commands::out_dir(&cli.out, &c.out_dir))
        }
        Command::Dip => {
            let mut c: config::DipCommandConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.dip_seed = s;
            }
            commands::dip(&c, &commands::out_dir(&cli.out, &c.out_dir))
        }
        Command::GradCheck => {
            let mut c: config::GradCheckConfig = config::load(path)?;
            if let Some(s) = cli.seed {
                c.init_seed = s;
            }
            commands::grad_check(&c, &commands::out_dir(&cli.out, &c.out_dir))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gate failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
