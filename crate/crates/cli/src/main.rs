//! `softalign` command-line tool.
//!
//! Every subcommand writes CSV to stdout (or files under `--out`). Exit
//! status is 0 on success, 1 when a run or check fails, and 2 for usage
//! errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "softalign", version, about = "Soft alignment toolkit and toy duration-learning trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy generator and save a checkpoint plus metrics.csv.
    TrainToy(TrainArgs),
    /// Per-token duration errors and a latent length histogram.
    EvalDurations(EvalArgs),
    /// Soft and hard DTW between two spectrogram dumps.
    DtwEval(DtwArgs),
    /// Log-mel spectrogram of a WAV file as a float32 dump.
    Spectrogram(SpectrogramArgs),
    /// Predicted token lengths of one text under several latent draws.
    AlignDemo(AlignArgs),
    /// Finite-difference check of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Median generation time over repeated batched runs.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    /// Optional `key=value` file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `dtw` or `l1`.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    #[arg(long)]
    pub lambda_length: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long)]
    pub adversarial: bool,
    #[arg(long)]
    pub stochastic_durations: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 64)]
    utterances: usize,
    /// Text for the length histogram.
    #[arg(long, default_value = "aeiok")]
    text: String,
    #[arg(long, default_value_t = 128)]
    z_draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for durations.csv and length_histogram.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DtwArgs {
    file_a: PathBuf,
    file_b: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    warp_penalty: f64,
    #[arg(long)]
    band: Option<usize>,
    /// Also print the hard path as `k,gen_idx,gt_idx` rows.
    #[arg(long)]
    path: bool,
}

#[derive(Args)]
struct SpectrogramArgs {
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// 24000 for the full front end, 4800 for the toy one.
    #[arg(long, default_value_t = 24_000)]
    sample_rate: u32,
    /// The file holds mu-law encoded samples.
    #[arg(long)]
    mu_law: bool,
}

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    text: String,
    #[arg(long, default_value_t = 8)]
    z_draws: usize,
    /// Untrained weights are used without one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long, default_value_t = softalign::diffcheck::DEFAULT_TOLERANCE)]
    tolerance: f64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    seconds: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 101)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainToy(a) => commands::train_toy(&a),
        Command::EvalDurations(a) => commands::eval_durations(&a.checkpoint, a.utterances, &a.text, a.z_draws, a.seed, a.out.as_deref()),
        Command::DtwEval(a) => commands::dtw_eval(&a.file_a, &a.file_b, a.tau, a.warp_penalty, a.band, a.path),
        Command::Spectrogram(a) => commands::spectrogram(&a.wav, &a.out, a.sample_rate, a.mu_law),
        Command::AlignDemo(a) => commands::align_demo(&a.text, a.z_draws, a.checkpoint.as_deref(), a.seed),
        Command::Gradcheck(a) => commands::gradcheck(a.seeds, a.tolerance),
        Command::Bench(a) => commands::bench(a.checkpoint.as_deref(), a.seconds, a.batch, a.runs, a.seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
