//! Command-line entry point: one subcommand per pipeline stage plus `all`
//! and `verify`. Configuration layers, lowest precedence first: the scale
//! preset, a TOML file, `MOERL_*` environment variables, CLI flags.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moerl::config::{self, ConfigSources, Scale};
use moerl::runner::{self, Stage};

#[derive(Parser)]
#[command(
    name = "moerl",
    about = "Mixture-of-experts treatment policies with doubly-robust off-policy evaluation",
    version
)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Preset scale: `desk` runs in minutes, `paper` reproduces full runs.
    #[arg(long, global = true, value_name = "SCALE")]
    scale: Option<Scale>,
    /// Run seed; stages derive their own streams from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    stage: StageCommand,
}

#[derive(Subcommand, Clone, Copy)]
enum StageCommand {
    /// Generate a synthetic cohort (or ingest `cohort_csv` from the config).
    Simulate,
    /// Split the cohort, fit scaling and action bins, write processed CSVs.
    Preprocess,
    /// Train the recurrent and sparse state autoencoders.
    TrainEncoder,
    /// Train the mortality model that defines per-step rewards.
    TrainReward,
    /// Train a dueling double-DQN expert per encoding.
    TrainDqn,
    /// Precompute kernel and behavior policies for every logged step.
    FitKernel,
    /// Optimize the gating network that mixes the two experts.
    FitMoe,
    /// Estimate every policy's value on the test split.
    Evaluate,
    /// Bootstrap the MoE-minus-physician value difference.
    Bootstrap,
    /// Render tables and figures from the evaluation artifacts.
    Report,
    /// Run every stage in order.
    All,
    /// Recompute the policy values and check them against the report.
    Verify,
}

impl From<StageCommand> for Stage {
    fn from(cmd: StageCommand) -> Stage {
        match cmd {
            StageCommand::Simulate => Stage::Simulate,
            StageCommand::Preprocess => Stage::Preprocess,
            StageCommand::TrainEncoder => Stage::TrainEncoder,
            StageCommand::TrainReward => Stage::TrainReward,
            StageCommand::TrainDqn => Stage::TrainDqn,
            StageCommand::FitKernel => Stage::FitKernel,
            StageCommand::FitMoe => Stage::FitMoe,
            StageCommand::Evaluate => Stage::Evaluate,
            StageCommand::Bootstrap => Stage::Bootstrap,
            StageCommand::Report => Stage::Report,
            StageCommand::All => Stage::All,
            StageCommand::Verify => Stage::Verify,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let sources = ConfigSources {
        file: cli.config,
        scale: cli.scale,
        seed: cli.seed,
        out_dir: cli.out,
        env: config::env_overrides(),
    };
    let result = config::resolve(&sources).and_then(|cfg| runner::run(&cfg, cli.stage.into()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
