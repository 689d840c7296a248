//! `gfbs`: train, score, prune and finetune small CNNs from the command line.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfbs_core::saliency::Criterion;
use gfbs_core::{DType, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "gfbs", version, about = "Channel pruning by batch-norm saliency")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Train a network from a spec file.
    Train(TrainArgs),
    /// Capture per-channel saliency records for a checkpoint.
    Saliency(SaliencyArgs),
    /// Brute-force oracle ranking, optionally compared with a saliency CSV.
    Oracle(OracleArgs),
    /// Plan and apply channel pruning from a saliency file.
    Prune(PruneArgs),
    /// Finetune a (pruned) checkpoint.
    Finetune(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Summarize a run directory as Markdown, optionally running a λ sweep first.
    Report(ReportArgs),
    /// Re-execute the command recorded in a manifest.
    Rerun(RerunArgs),
}

/// Shared by `train` and `finetune`.
#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Network spec file (train only; finetune reads the architecture from the checkpoint).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Starting checkpoint (finetune only).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset descriptor, e.g. `shapes:n_train=2000,seed=1`.
    #[arg(long)]
    pub data: String,
    /// TOML training config; the task's preset is used when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's epoch count (milestones beyond it are dropped).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight initialization seed (train only).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Element type for training; finetune defaults to the checkpoint's.
    #[arg(long, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = gfbs_core::saliency::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = Criterion::Gfbs)]
    pub criterion: Criterion,
    /// Selects which training samples form the minibatch.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Minibatches whose gradients are averaged.
    #[arg(long, default_value_t = 1)]
    pub batches: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Saliency CSV to correlate with the oracle ranking.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `saliency.csv` or `saliency.json` from the saliency command.
    #[arg(long)]
    pub saliency: PathBuf,
    /// Fraction of prunable channels (or FLOPs, with --flops) to remove.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub min_keep: usize,
    /// Interpret tau as a FLOPs reduction.
    #[arg(long)]
    pub flops: bool,
    /// Rescore the records with this criterion instead of using their scores.
    #[arg(long)]
    pub criterion: Option<Criterion>,
    /// λ used when rescoring.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 100)]
    pub batch_size: usize,
    /// Also write eval.json and a manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// Run saliency, prune, finetune and eval for every λ before reporting.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, required_if_eq("sweep", "true"))]
    pub ckpt: Option<PathBuf>,
    #[arg(long, required_if_eq("sweep", "true"))]
    pub data: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.005, 0.05, 0.5])]
    pub lambdas: Vec<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub min_keep: usize,
    #[arg(long)]
    pub flops: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finetuning config for the sweep; the task's finetune preset by default.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_dtype(s: &str) -> std::result::Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(format!("unknown dtype `{other}` (f32, f64)")),
    }
}

fn init_threads() -> Result<()> {
    let Ok(value) = std::env::var("GFBS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("GFBS_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
