mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "promptmad", version, about = "Prompt-guided multi-class anomaly detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus root in the MVTec directory layout.
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replaces `train.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted `key=value` override, applied in order after the file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Run every fan-out loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, loss log and manifest.
    Train {
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test split and write report.md and report.json.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth masks as predictions.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Write anomaly maps as a float array and as heatmap PNGs.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Only this class.
        #[arg(long)]
        class: Option<String>,
        /// Which split to score: test, train or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Generate the synthetic corpus on disk.
    SynthData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_test: usize,
    },
    /// Train and evaluate the six component configurations.
    Ablate,
    /// Measure single-sample inference latency.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_samples: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let common = cli.common;
    let result = match cli.command {
        Command::Train { resume } => commands::train(&common, resume.as_deref()),
        Command::Eval { checkpoint, oracle } => commands::eval(&common, checkpoint.as_deref(), oracle),
        Command::Infer { checkpoint, class, split } => commands::infer(&common, &checkpoint, class.as_deref(), &split),
        Command::SynthData { classes, n_train, n_test } => commands::synth_data(&common, classes, n_train, n_test),
        Command::Ablate => commands::ablate(&common),
        Command::Bench { checkpoint, n_samples, warmup } => commands::bench(&common, &checkpoint, n_samples, warmup),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
