//! `toolrank`: data generation, collaborative fitting, two-stage training,
//! evaluation and numerical verification, driven by one TOML file.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use toolrank::corpus::SplitTag;

use crate::commands::{Run, Stage};
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "toolrank", version, about = "Train and evaluate tool-using ranking agents")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "toolrank.toml")]
    config: PathBuf,

    /// Worker threads (defaults to one per core). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Replaces the master seed from the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or ingest the dataset and build the splits.
    GenData,
    /// Fit item and user embeddings on the training-visible interactions.
    FitCollab,
    /// Train the policy.
    Train {
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: SplitTag,
    },
    /// Run the numerical checks; exits nonzero if any fails.
    Verify,
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure worker threads")?;
    }
    let mut cfg = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed_override {
        cfg.seed = seed;
    }
    let mut run = Run::new(cfg);
    match cli.command {
        Command::GenData => commands::gen_data(&mut run)?,
        Command::FitCollab => commands::fit_collab(&mut run)?,
        Command::Train { stage } => commands::train(&mut run, stage)?,
        Command::Eval { checkpoint, split } => commands::eval(&mut run, &checkpoint, split)?,
        Command::Verify => return commands::verify(&mut run),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("toolrank: verification failed; see reports/verify.json");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("toolrank: {e:#}");
            ExitCode::FAILURE
        }
    }
}
