mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-view screening classifier: data generation, training, evaluation,
/// prediction, saliency maps and sweeps.
#[derive(Parser, Debug)]
#[command(name = "mvscreen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory holding manifest.jsonl.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Input resolution: 1, 1/2, 1/4 or 1/8.
    #[arg(long)]
    scale: Option<String>,
    /// Fraction of training exams to use.
    #[arg(long)]
    fraction: Option<f64>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepMode {
    Fraction,
    Resolution,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (16-bit PGM images plus manifest.jsonl).
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_exams: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "1/8")]
        scale: String,
        /// Class proportions for labels 0,1,2.
        #[arg(long, default_value = "13,46,41")]
        class_mix: String,
        /// Extra full-resolution pixels around the 2600x2000 crop.
        #[arg(long, default_value_t = 0)]
        margin: usize,
    },
    /// Train a model and keep the checkpoint with the best validation macAUC.
    Train(RunArgs),
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        hc_percent: Option<f64>,
        #[arg(long)]
        tta_crops: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write per-exam class probabilities.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Predict a single exam from the dataset.
        #[arg(long, conflicts_with = "manifest")]
        exam_id: Option<String>,
        /// Predict every exam in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        tta_crops: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write entropy-gradient heatmaps for the four views of an exam.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        exam_id: String,
        #[arg(long, default_value_t = 99.0)]
        percentile: f64,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train one model per data fraction or per resolution.
    Sweep {
        #[arg(long, value_enum)]
        mode: SweepMode,
        #[command(flatten)]
        run: RunArgs,
    },
}

fn threads() -> anyhow::Result<usize> {
    match std::env::var("MVSCREEN_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().map_err(|_| anyhow::anyhow!("MVSCREEN_THREADS must be a positive integer, got {v:?}"))?;
            anyhow::ensure!(n >= 1, "MVSCREEN_THREADS must be >= 1");
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(threads()?).build_global()?;
    match cli.command {
        Command::GenData { out, n_exams, seed, scale, class_mix, margin } => {
            commands::gen_data(&out, n_exams, seed, &scale, &class_mix, margin)
        }
        Command::Train(run) => commands::train(&run),
        Command::Evaluate { checkpoint, split, hc_percent, tta_crops, run } => {
            commands::evaluate(&checkpoint, split, hc_percent, tta_crops, &run)
        }
        Command::Predict { checkpoint, exam_id, manifest, tta_crops, run } => {
            commands::predict(&checkpoint, exam_id.as_deref(), manifest.as_deref(), tta_crops, &run)
        }
        Command::Saliency { checkpoint, exam_id, percentile, run } => {
            commands::saliency(&checkpoint, &exam_id, percentile, &run)
        }
        Command::Sweep { mode, run } => commands::sweep(mode, &run),
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
