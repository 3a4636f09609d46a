//! `ppgresp`: ingest recordings, train the noise predictor, sample and
//! score respiration estimates.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 non-finite
//! loss during training, 4 file-system or format error.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ppg_resp::Sampler;

#[derive(Debug, Parser)]
#[command(name = "ppgresp", version, about = "Respiration waveforms from PPG with a conditional diffusion model")]
struct Cli {
    /// Output root; each subcommand writes below it.
    #[arg(long, global = true, env = "PPGRESP_OUT", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Preprocess recordings into a segment store.
    Ingest(IngestArgs),
    /// Leave-one-subject-out training.
    Train(TrainArgs),
    /// Sample respiration for a subject's segments.
    Sample(InferArgs),
    /// Sample and score a subject in 60 s windows.
    Eval(EvalArgs),
    /// Emit overlay traces (truth vs prediction) as CSV columns.
    Plot(InferArgs),
    /// Score trained LOSO sweeps over a sampler/NFE grid.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// TOML manifest of CSV/TSV recordings.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    manifest: Option<PathBuf>,
    /// TOML description of a synthetic cohort.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    store: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainOverrides {
    /// TOML training config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_spec: Option<f64>,
    #[arg(long)]
    no_spectral_loss: bool,
    /// Fine-encoder kernel sizes, e.g. 3,3,3,3,3,3.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    /// Held-out subject, or `all` for a full sweep.
    #[arg(long)]
    subject: String,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Debug, Args, Clone)]
pub struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    subject: String,
    /// Defaults to the sampler stored in the checkpoint.
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long)]
    nfe: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    window_s: f64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    infer: InferArgs,
    /// Score this prediction file (as written by `sample`) instead of sampling.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Sliding windows with this hop instead of non-overlapping ones.
    #[arg(long)]
    hop_s: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    #[arg(long)]
    store: PathBuf,
    /// `label=DIR`, where DIR is a `train --subject all` output directory.
    #[arg(long = "model", required = true)]
    models: Vec<String>,
    /// `sampler:nfe` pairs.
    #[arg(long, value_delimiter = ',', default_value = "ddim:50,ddim:6")]
    grid: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    window_s: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => commands::ingest(&cli.out, a),
        Command::Train(a) => commands::train(&cli.out, a),
        Command::Sample(a) => commands::sample(&cli.out, a),
        Command::Eval(a) => commands::eval(&cli.out, a),
        Command::Plot(a) => commands::plot(&cli.out, a),
        Command::Benchmark(a) => commands::benchmark(&cli.out, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
