//! `seekit`: calibrate noise bases, score and neutralize activations,
//! generate synthetic datasets and correlate scores with outcomes.
//!
//! Exit codes: 0 success, 1 I/O, 2 domain or degenerate input, 64 usage.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand, ValueEnum};
use seekit_core::{Error, SampleKind};

const EXIT_IO: u8 = 1;
const EXIT_DOMAIN: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, Parser)]
#[command(name = "seekit", version, about = "Noise-subspace diagnostics for layer activations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Localize noise-carrying layers and extract per-layer noise bases.
    Calibrate(CalibrateArgs),
    /// Score samples against a bundle and write a score CSV.
    Score(ScoreArgs),
    /// Remove the noise-subspace component and write a mirrored dataset.
    Neutralize(NeutralizeArgs),
    /// Generate a synthetic dataset with planted subspaces.
    Synth(SynthArgs),
    /// Correlate mean SEE per condition with an outcome table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Dataset manifest with paired semantic and noise samples.
    #[arg(long)]
    manifest: PathBuf,
    /// Bundle output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cosine threshold for discarding semantic-aligned noise directions.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Keep the singular-value prefix holding this share of energy.
    #[arg(long, default_value_t = 0.95, conflicts_with = "alpha")]
    energy_ratio: f64,
    /// Keep singular values above this absolute threshold instead.
    #[arg(long)]
    alpha: Option<f64>,
    /// Denominator guard, stored in the bundle and reused by scoring.
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Select the argmax-magnitude layer onward when no layer passes both means.
    #[arg(long)]
    fallback_argmax: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    Semantic,
    Noise,
    Test,
    All,
}

impl KindArg {
    fn filter(self) -> Option<SampleKind> {
        match self {
            KindArg::Semantic => Some(SampleKind::Semantic),
            KindArg::Noise => Some(SampleKind::Noise),
            KindArg::Test => Some(SampleKind::Test),
            KindArg::All => None,
        }
    }
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Bundle directory written by `calibrate`.
    #[arg(long)]
    bundle: PathBuf,
    /// Score CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Which samples to score.
    #[arg(long, value_enum, default_value_t = KindArg::Test)]
    kind: KindArg,
    /// Reporting multiplier applied to written and printed scores.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Debug, Args)]
struct NeutralizeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Output directory for the neutralized tensors and their manifest.
    #[arg(long)]
    out: PathBuf,
    /// Removal strength in [0, 1].
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = KindArg::Test)]
    kind: KindArg,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Dataset output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Comma-separated SNR levels in dB.
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-10,-5,0,5,10,20,30"
    )]
    snr: Vec<f64>,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    semantic_rank: usize,
    #[arg(long, default_value_t = 3)]
    noise_rank: usize,
    /// First 1-based layer that carries noise.
    #[arg(long, default_value_t = 5)]
    noise_onset: usize,
    /// Calibration pairs.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    /// Mixed test samples per SNR level.
    #[arg(long, default_value_t = 20)]
    tests_per_level: usize,
    /// Level of the paired-noise trace in calibration semantic samples ("inf" disables).
    #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
    environment_snr: f64,
    /// Tilt of the first noise direction toward the semantic span, radians.
    #[arg(long, default_value_t = 0.0)]
    overlap_angle: f64,
    #[arg(long, default_value_t = 1e-3)]
    jitter: f64,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Score CSV written by `score`.
    #[arg(long)]
    scores: PathBuf,
    /// CSV with header condition_id,outcome.
    #[arg(long)]
    outcomes: PathBuf,
    /// Report CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Optional scatter plot.
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => EXIT_USAGE,
            Failure::Core(e) if e.is_io() => EXIT_IO,
            Failure::Core(_) => EXIT_DOMAIN,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(msg) => f.write_str(msg),
            Failure::Core(e) => e.fmt(f),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let raw = match std::env::var("SEEKIT_THREADS") {
        Ok(v) => v,
        Err(std::env::VarError::NotPresent) => return Ok(()),
        Err(e) => return Err(Failure::Usage(format!("SEEKIT_THREADS: {e}"))),
    };
    let threads = raw
        .trim()
        .parse::<usize>()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("SEEKIT_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Score(a) => commands::score(a),
        Command::Neutralize(a) => commands::neutralize(a),
        Command::Synth(a) => commands::synth(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("seekit: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
