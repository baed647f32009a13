//! `fluoro`: preprocess slides into bags, train with patient-stratified
//! cross-validation, evaluate and export a trained checkpoint, or run the
//! built-in selftest.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or format,
//! 3 numeric.

mod preprocess;
mod run;

use clap::{Args, Parser, Subcommand};
use fluoroformer::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fluoro", version, about = "Multiplexed whole-slide survival modeling")]
struct Cli {
    /// Worker threads; overrides the FLUORO_THREADS environment variable.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Turn per-slide channel images into embedded bags plus a manifest.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic cohort with a known risk oracle.
    Synth(SynthArgs),
    /// Cross-validated training over a bag directory.
    Train(TrainArgs),
    /// Score a cohort with a trained checkpoint.
    Evaluate(EvaluateArgs),
    /// Write attention heatmaps and channel-attention summaries.
    Export(ExportArgs),
    /// Run the built-in gradient, fixture, and round-trip checks.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct PreprocessArgs {
    /// Directory with one subdirectory of grayscale channel PNGs per slide.
    #[arg(long)]
    input: PathBuf,
    /// Intensity polarity: "mif" (bright signal) or "he" (dark tissue).
    #[arg(long, default_value = "mif")]
    mode: String,
    /// Patch edge length in pixels.
    #[arg(long, default_value_t = 224)]
    patch_size: usize,
    /// Downsample factor for the foreground grid; one cell per patch.
    #[arg(long, default_value_t = 224)]
    factor: usize,
    /// "stub" embeds in-process; "import" ingests precomputed .bag files.
    #[arg(long, default_value = "stub")]
    embedder: String,
    /// Embedding width for the stub embedder; checked against imports.
    #[arg(long)]
    d_emb: Option<usize>,
    /// Stub embedder seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Survival labels (sample_id,patient_id,time_days,censored); without
    /// one, every sample is written censored at time 0.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// "linear" plants a channel-mean signal; "interaction" hides the risk
    /// in a two-channel product.
    #[arg(long, default_value = "linear")]
    kind: String,
    #[arg(long, default_value_t = 200)]
    n: usize,
    /// Channels per patch.
    #[arg(long, default_value_t = 7)]
    m: usize,
    #[arg(long, default_value_t = 64)]
    d_emb: usize,
    /// Patches per slide edge; K = grid * grid.
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value_t = 0.3)]
    censor_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory containing manifest.csv and the bags it references.
    #[arg(long)]
    bags: PathBuf,
    /// JSON config file; explicit flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// "fluoroformer" or "channel_mean".
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    n_bin: Option<usize>,
    #[arg(long)]
    d_hid: Option<usize>,
    #[arg(long)]
    d_att: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// "f32" or "f64".
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory containing manifest.csv and the bags it references.
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory containing manifest.csv and the bags it references.
    #[arg(long)]
    bags: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    /// Corrupt the checkpoint magic inside the round-trip check.
    #[arg(long, hide = true)]
    inject_format_bug: bool,
    /// Offset one analytic gradient before the finite-difference comparison.
    #[arg(long, hide = true)]
    inject_gradient_bug: bool,
}

fn exit_code_of(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Dim(_) | Error::Contract(_) | Error::Format(_) | Error::Io(_) => 2,
        Error::Numeric(_) | Error::UndefinedMetric(_) => 3,
    }
}

fn init_threads(flag: Option<usize>) -> Result<(), Error> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FLUORO_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                Error::config(format!("FLUORO_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::config("thread count must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    init_threads(cli.threads)?;
    match cli.command {
        Command::Preprocess(args) => preprocess::run(&args).map(|_| ExitCode::SUCCESS),
        Command::Synth(args) => run::synth(&args).map(|_| ExitCode::SUCCESS),
        Command::Train(args) => run::train(&args).map(|_| ExitCode::SUCCESS),
        Command::Evaluate(args) => run::evaluate(&args).map(|_| ExitCode::SUCCESS),
        Command::Export(args) => run::export(&args).map(|_| ExitCode::SUCCESS),
        Command::Selftest(args) => run::selftest(&args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version render through the error path but are not errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}
