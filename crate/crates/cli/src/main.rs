use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod manifest;

#[derive(Debug, Parser)]
#[command(name = "trajgpt", version, about = "Visit-sequence modeling: preprocessing, training, evaluation and infilling")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; overrides the config file
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed seed (0 unless given) and a single worker thread unless --threads is set
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Worker threads for batch and metric evaluation
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Plt,
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Next,
    Infill,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Full,
    Independence,
    Regression,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DecodeArg {
    Greedy,
    Sample,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Raw traces to region-discretized JSONL splits and a vocabulary
    Preprocess {
        /// GeoLife root directory, CSV file or JSONL visit file
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Synthetic daily-routine sequences
    Synth {
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
    },
    /// Train a model and keep the best checkpoint
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Teacher-forced metrics of a checkpoint on a data file
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Fill the BLANKs of partial sequences
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        decode: Option<DecodeArg>,
        #[arg(long)]
        max_per_blank: Option<usize>,
    },
    /// Train and evaluate all three variants under one budget
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<trajgpt::Error>().map_or("error", |e| e.kind());
            let report = serde_json::json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{report}");
            ExitCode::FAILURE
        }
    }
}
