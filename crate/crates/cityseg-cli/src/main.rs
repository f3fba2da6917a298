//! `cityseg` — generate synthetic city scenes, preprocess point clouds,
//! train the two-stage model, evaluate, fine-tune incrementally, run
//! zero-shot inference, and certify gradients.
//!
//! All randomness is seeded from the config file (`CITYSEG_SEED`
//! overrides); identical config + seed reproduce byte-identical parameter
//! snapshots and metrics reports.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cityseg", version, about = "City-scale point-cloud segmentation pipeline")]
struct Cli {
    /// Run configuration file (`key = value` with [section] headers).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fixture: CSPC scenes + hierarchy + manifest.
    Generate {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Fixture name (toy|conflict|context|heldout); overrides the config.
        #[arg(long)]
        fixture: Option<String>,
    },
    /// Grid-sample a cloud and reorder it along a space-filling curve.
    Preprocess {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "FILE")]
        output: PathBuf,
    },
    /// Train stage 1 (base classes) or stage 2 (subclasses + hinge).
    Train {
        /// Dataset directory (hierarchy.tsv + manifest.tsv + scenes).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for snapshots and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Initial parameters; stage 2 defaults to the stage-1 snapshot in --out.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Evaluate a snapshot on the eval split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// base | domain
        #[arg(long, default_value = "domain")]
        granularity: String,
        /// Also write the machine-readable record here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Replay-based incremental fine-tuning on a new domain.
    Finetune {
        /// Old-domain dataset directory (replay source).
        #[arg(long)]
        data: PathBuf,
        /// New-domain dataset directory.
        #[arg(long)]
        new_data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// New leaves as `parent_id:text`, repeatable.
        #[arg(long = "new-leaf")]
        new_leaves: Vec<String>,
    },
    /// Zero-shot inference with inserted leaves; parameters stay frozen.
    Zeroshot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        /// New leaves as `parent_id:text`, repeatable.
        #[arg(long = "new-leaf")]
        new_leaves: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Seeds per component.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match config::RunConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("cityseg: {e}");
                return ExitCode::FAILURE;
            }
        },
        None => config::RunConfig::default(),
    };
    let result = match cli.command {
        Command::Generate { out, fixture } => commands::generate(&cfg, &out, fixture.as_deref()),
        Command::Preprocess { input, output } => commands::preprocess(&cfg, &input, &output),
        Command::Train {
            data,
            out,
            stage,
            init,
        } => commands::train(&cfg, &data, &out, stage, init.as_deref()),
        Command::Eval {
            data,
            params,
            granularity,
            json,
        } => commands::eval(&cfg, &data, &params, &granularity, json.as_deref()),
        Command::Finetune {
            data,
            new_data,
            params,
            out,
            new_leaves,
        } => commands::finetune(&cfg, &data, &new_data, &params, &out, &new_leaves),
        Command::Zeroshot {
            data,
            params,
            new_leaves,
        } => commands::zeroshot(&cfg, &data, &params, &new_leaves),
        Command::Gradcheck { seeds } => commands::gradcheck(seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cityseg: {e}");
            ExitCode::FAILURE
        }
    }
}
