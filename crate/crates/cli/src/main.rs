//! `dva`: dataset generation, training, evaluation, gradient checks,
//! kernel benchmarks and BEV heatmap export.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage error, 3 I/O error.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dva_core::Error;

#[derive(Debug, Parser)]
#[command(name = "dva", version = dva_core::VERSION, about = "Dual-view attention BEV toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene corpus.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint and a report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Time the forward kernel.
    Bench(BenchArgs),
    /// Write the predicted BEV occupancy of one scene as a PGM image.
    DumpBev(DumpBevArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 8)]
    boxes: usize,
    #[arg(long)]
    out: std::path::PathBuf,
    /// Geometry JSON (rig, depth bins, grid); defaults to the 6-camera surround rig.
    #[arg(long)]
    geometry: Option<std::path::PathBuf>,
    /// Upper bound on the ego translation between timestamps (m).
    #[arg(long, default_value_t = 2.0)]
    max_translation: f64,
    /// Upper bound on the ego yaw change between timestamps (rad).
    #[arg(long, default_value_t = 0.1)]
    max_yaw: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training config JSON; missing fields take their defaults.
    #[arg(long)]
    config: Option<std::path::PathBuf>,
    #[arg(long)]
    data: std::path::PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Report output path; printed to stdout when absent.
    #[arg(long)]
    report: Option<std::path::PathBuf>,
    /// Overrides the config's method (dva, lss, bev-only).
    #[arg(long)]
    method: Option<dva_core::Method>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_encoders: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    /// Report output path; printed to stdout when absent.
    #[arg(long)]
    report: Option<std::path::PathBuf>,
}

/// Kernel problem sizes shared by `gradcheck` and `bench`.
#[derive(Debug, Args, Clone)]
struct SizeArgs {
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    /// Grid dimensions as `XxYxZ`.
    #[arg(long, value_parser = commands::parse_grid)]
    grid: Option<[usize; 3]>,
    #[arg(long)]
    channels: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[command(flatten)]
    sizes: SizeArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Floating-point precision of the check.
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    mode: Precision,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    /// Negates the kernel's depth gradient (mutation test).
    #[arg(long, hide = true)]
    inject_gd_sign_flip: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    sizes: SizeArgs,
    #[arg(long, default_value = "deterministic")]
    strategy: dva_core::Reduction,
    /// Worker threads (0 = all cores); defaults to DVA_THREADS, then 1.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DumpBevArgs {
    #[arg(long)]
    ckpt: std::path::PathBuf,
    #[arg(long)]
    data: std::path::PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: std::path::PathBuf,
}

/// Failure classes, one per exit code.
#[derive(Debug)]
enum Failure {
    Check(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io(_) | Error::BadMagic { .. } | Error::VersionMismatch { .. } | Error::CorruptRecord { .. } => {
                Failure::Io(msg)
            }
            Error::DivergenceDetected { .. } => Failure::Check(msg),
            _ => Failure::Usage(msg),
        }
    }
}

/// Reads `DVA_THREADS`; `Some(0)` means automatic.
fn env_threads() -> Result<Option<usize>, Failure> {
    match std::env::var("DVA_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("DVA_THREADS must be a non-negative integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let threads = env_threads()?;
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Bench(a) => commands::bench(a, threads),
        Command::DumpBev(a) => commands::dump_bev(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Check(m) | Failure::Usage(m) | Failure::Io(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
