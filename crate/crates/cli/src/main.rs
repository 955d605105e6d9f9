//! Command-line front end: training runs, checkpoint deployment, cost-map
//! rasters, analytic bound checks, and multi-seed sweeps.
//!
//! Every subcommand writes its artifacts into a deterministic run directory
//! (`<kind>-<hash8>-seed<k>` under the configured output root, or under
//! `$USC_OUT` when that variable is set) and prints the directory path to
//! stdout, one line per run. On failure a single machine-readable JSON line
//! `{"class": ..., "message": ...}` goes to stderr and the exit code is
//! nonzero.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use usc_core::eval::TheoremConfig;
use usc_core::harness;

#[derive(Parser)]
#[command(
    name = "usc",
    version,
    about = "Desk-scale laboratory for uncertainty-weighted conservative safety critics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write the full evaluation bundle.
    Train {
        /// Run configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Master seed; all randomness fans out from it.
        #[arg(long)]
        seed: u64,
    },
    /// Roll out a trained checkpoint without exploration noise.
    Deploy {
        /// Checkpoint file written by a training run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long)]
        episodes: usize,
        /// Master seed for the rollout streams.
        #[arg(long)]
        seed: u64,
    },
    /// Rasterize the checkpointed safety critic over the position grid.
    Costmap {
        /// Checkpoint file written by a training run.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid resolution per axis.
        #[arg(long)]
        resolution: usize,
    },
    /// Monte-Carlo check of the conservatism-gap lower bound.
    Theorem1 {
        /// Risky-set mass under the policy sampler.
        #[arg(long = "p-pi")]
        p_pi: f64,
        /// Risky-set mass under the uniform sampler.
        #[arg(long = "p-unif")]
        p_unif: f64,
        /// Candidate actions per draw.
        #[arg(long)]
        m: usize,
        /// Risk threshold.
        #[arg(long)]
        tau: f64,
        /// Critic value off the risky set.
        #[arg(long)]
        lower: f64,
        /// Critic value on the risky set.
        #[arg(long)]
        upper: f64,
        /// Monte-Carlo draw count.
        #[arg(long)]
        draws: usize,
    },
    /// Train the first k configured seeds concurrently and aggregate them.
    Sweep {
        /// Run configuration file (JSON).
        #[arg(long)]
        config: PathBuf,
        /// How many of the configured seeds to run.
        #[arg(long)]
        seeds: usize,
    },
}

fn run(cmd: Command) -> usc_core::Result<Vec<PathBuf>> {
    match cmd {
        Command::Train { config, seed } => Ok(vec![harness::cmd_train(&config, seed)?]),
        Command::Deploy { checkpoint, episodes, seed } => {
            Ok(vec![harness::cmd_deploy(&checkpoint, episodes, seed)?])
        }
        Command::Costmap { checkpoint, resolution } => {
            Ok(vec![harness::cmd_costmap(&checkpoint, resolution)?])
        }
        Command::Theorem1 { p_pi, p_unif, m, tau, lower, upper, draws } => {
            let cfg = TheoremConfig {
                lower,
                upper,
                tau,
                p_pi,
                p_unif,
                m,
                temperature: 1.0,
                draws,
            };
            Ok(vec![harness::cmd_theorem1(&cfg)?])
        }
        Command::Sweep { config, seeds } => harness::cmd_sweep(&config, seeds),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(dirs) => {
            for dir in dirs {
                println!("{}", dir.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "class": e.class(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
