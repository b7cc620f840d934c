use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dacl", version, about = "Density-aware contrastive co-training on synthetic segmentation scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train both models and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on the test split.
    Eval(EvalArgs),
    /// Write test-split prototypes to CSV and print cluster scores.
    DumpEmbeddings(DumpArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long = "labeled-frac", default_value_t = 0.05)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub blur: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file applied over the defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Component row: baseline, pcl, da, ms, bank or none.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Peak contrastive weight; 0 disables the contrastive term.
    #[arg(long = "lambda-cl")]
    pub lambda_cl: Option<f64>,
    /// Training length; also sets the warm-up horizon.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Evaluate on the test split every N steps (0 = only at the end).
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overwrite a non-empty run directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report path; defaults to printing only.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV path; defaults to `<run>/embeddings.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
