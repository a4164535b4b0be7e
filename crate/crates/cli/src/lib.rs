//! Command-line surface for tpsmark: synthetic data, manifests, training,
//! inference, registration, pruning, Z-scores and λ sweeps.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod output;
pub mod plot;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "tpsmark", version, about = "Landmark discovery by differentiable thin-plate-spline registration")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shape corpus with masks and a manifest.
    Synth(commands::SynthArgs),
    /// Train an encoder; writes model.ckpt and history.csv.
    Train(commands::TrainArgs),
    /// Write per-image landmarks.
    Infer(commands::InferArgs),
    /// Warp one image onto another and report residual statistics.
    Register(commands::RegisterArgs),
    /// Greedily remove redundant landmarks.
    Prune(commands::PruneArgs),
    /// Score images against a control population.
    Zscore(commands::ZscoreArgs),
    /// Cross-validate λ; writes sweep.csv and sweep.png.
    Sweep(commands::SweepArgs),
}

/// Runs one parsed command.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Synth(a) => commands::cmd_synth(a).map(|m| log::info!("wrote {} records", m.records.len())),
        Command::Train(a) => commands::cmd_train(a).map(|s| log::info!("best epoch {}", s.best_epoch)),
        Command::Infer(a) => commands::cmd_infer(a),
        Command::Register(a) => commands::cmd_register(a).map(|s| log::info!("loss {:.6} -> {:.6}", s.before, s.after)),
        Command::Prune(a) => commands::cmd_prune(a).map(|r| log::info!("{} landmarks survive", r.surviving.len())),
        Command::Zscore(a) => commands::cmd_zscore(a).map(|r| log::info!("scored {} records", r.len())),
        Command::Sweep(a) => commands::cmd_sweep(a).map(|c| log::info!("{} sweep cells", c.len())),
    }
}

/// Single-line rendering of an error and its causes.
pub fn diagnostic(e: &anyhow::Error) -> String {
    format!("error: {e:#}").replace(['\n', '\r'], " ")
}
