//! Command-line front end: data generation, training, evaluation, ablation,
//! benchmarking and attention inspection.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "condense", version, about = "Prompt condensation for visual in-context learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenArgs),
    /// Train a Condenser (pre-fitting the backbone unless one is given).
    Train(TrainArgs),
    /// Score the test queries of a dataset.
    Eval(EvalArgs),
    /// Evaluate one ablation variant, retraining when the variant needs it.
    Ablate(EvalArgs),
    /// Time condensation against output fusion over a list of K.
    Bench(BenchArgs),
    /// Print the per-candidate attention at one answer position.
    InspectAttention(InspectArgs),
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` run file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// seg | det | color
    #[arg(long)]
    pub task: Option<String>,
    /// desk | paper
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainOpts {
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// pixel | feature | random
    #[arg(long)]
    pub retrieval: Option<String>,
    /// condense | mean_pool | full_ca | output_fusion | no_pa | no_tp
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metrics file; defaults to `metrics.jsonl` next to the checkpoint.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Backbone-only checkpoint to train against instead of pre-fitting.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Epochs of backbone pre-fitting.
    #[arg(long)]
    pub prefit_epochs: Option<usize>,
    /// Stop after pre-fitting and write a backbone-only checkpoint.
    #[arg(long)]
    pub prefit_only: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub opts: TrainOpts,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON-lines report to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Where `ablate` saves a retrained checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated K values.
    #[arg(long)]
    pub k_list: Option<String>,
    /// Timed queries per K.
    #[arg(long)]
    pub queries: Option<usize>,
    /// CSV to write; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Query id, from either query split.
    #[arg(long)]
    pub query: String,
    /// Patch row within the answer region.
    #[arg(long)]
    pub h: usize,
    /// Patch column within the answer region.
    #[arg(long)]
    pub w: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<prompt_condense::Error>().is_some_and(|e| e.is_config())
    });
    if config {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::Bench(a) => commands::bench(a),
        Command::InspectAttention(a) => commands::inspect_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
