//! `her2`: generate synthetic cohorts, train the patch classifier under
//! guideline constraints, calibrate it and score slides.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Subset;
use config::{PipelineConfig, CONFIG_HELP};
use error::CliError;

#[derive(Parser)]
#[command(name = "her2", version, about = "Guideline-constrained weakly supervised HER2 scoring")]
#[command(after_long_help = CONFIG_HELP)]
struct Cli {
    /// Pipeline config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (and rater label files when configured).
    Generate {
        /// Output cohort path instead of `paths.cohort`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Supervised pretraining with every patch labeled by its slide.
    Pretrain,
    /// Weakly supervised training against the guideline constraints.
    TrainWeak {
        /// Starting checkpoint (default: checkpoints/pretrain.json).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Also write the final model's selected patches as JSONL.
        #[arg(long)]
        dump_selections: bool,
    },
    /// Write frozen per-patch logits for calibration.
    DumpLogits {
        /// Checkpoint (default: checkpoints/weak.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit per-class logit scales on a logits dump.
    Calibrate {
        /// Logits dump (default: checkpoints/logits.jsonl).
        #[arg(long)]
        logits: Option<PathBuf>,
    },
    /// Per-slide guideline verdicts.
    Score {
        /// Checkpoint (default: checkpoints/weak.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Calibration file; identity scaling when omitted.
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Cohort to score (default: `paths.cohort`).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics, confusion matrices and KDE tables for every available stage.
    Report,
    /// Pairwise agreement between rater label files (default: all files in `paths.raters`).
    Agreement { files: Vec<PathBuf> },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    cfg.apply_seed();
    if let Some(n) = cfg.workers {
        if n == 0 {
            return Err(CliError::validation("config", "workers must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::validation("config", e))?;
    }
    match cli.command {
        Command::Generate { out } => commands::generate(&cfg, out),
        Command::Pretrain => commands::pretrain_cmd(&cfg),
        Command::TrainWeak { init, dump_selections } => commands::train_weak_cmd(&cfg, init, dump_selections),
        Command::DumpLogits { checkpoint, subset, out } => commands::dump_logits(&cfg, checkpoint, subset, out),
        Command::Calibrate { logits } => commands::calibrate(&cfg, logits),
        Command::Score {
            checkpoint,
            calibration,
            input,
            out,
        } => commands::score(&cfg, checkpoint, calibration, input, out),
        Command::Report => commands::report(&cfg),
        Command::Agreement { files } => commands::agreement(&cfg, files),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", serde_json::to_string(&e).expect("error serializes"));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
