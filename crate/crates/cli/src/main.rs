use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use flatland::landscape::Normalization;
use flatland_cli::commands::{self, EvalArgs, LandscapeArgs, SliceMode, TrainArgs};
use flatland_cli::config;

#[derive(Parser, Debug)]
#[command(name = "flatland", version, about = "Desk-scale flat-minima experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the stage plan and write checkpoints, metrics and a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of stages, e.g. `1` or `3,4`.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
        /// Checkpoint to continue from when the subset skips earlier stages.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Plain and TTA accuracy of a checkpoint, or a leave-one-domain-out table.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of augmented copies averaged with the clean image.
        #[arg(long, allow_negative_numbers = true)]
        tta: Option<i64>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        lodo: bool,
    },
    /// Loss slice around a checkpoint plus its sharpness.
    Landscape {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "1d")]
        mode: SliceMode,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        normalization: Option<Normalization>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Write the synthetic dataset as raw RGB files plus a manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, stages, init } => {
            let cfg = config::load(&config)?;
            commands::cmd_train(TrainArgs { config: &cfg, stages, init })
        }
        Command::Eval {
            config,
            checkpoint,
            tta,
            resolution,
            lodo,
        } => {
            let cfg = config::load(&config)?;
            commands::cmd_eval(EvalArgs {
                config: &cfg,
                checkpoint,
                tta,
                resolution,
                lodo,
            })
        }
        Command::Landscape {
            config,
            checkpoint,
            mode,
            r,
            steps,
            normalization,
            resolution,
        } => {
            let cfg = config::load(&config)?;
            commands::cmd_landscape(LandscapeArgs {
                config: &cfg,
                checkpoint,
                mode,
                r,
                steps,
                normalization,
                resolution,
            })
            .map(|_| ())
        }
        Command::GenData { config, resolution } => {
            let cfg = config::load(&config)?;
            commands::cmd_gen_data(&cfg, resolution).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
