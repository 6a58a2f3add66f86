use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "dynsplat",
    version,
    about = "Gaussian-splatting SLAM for dynamic RGB-D sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track and map a TUM-layout sequence, then refine and evaluate.
    Run(RunArgs),
    /// Generate a synthetic sequence with a rigidly moving object.
    Synth(SynthArgs),
    /// Render a checkpoint at a pose and time.
    Render(RenderArgs),
    /// Evaluate a finished run against a ground-truth sequence.
    Eval(EvalArgs),
}

#[derive(Args)]
pub struct RunArgs {
    /// Sequence directory (rgb.txt, depth.txt, optional mask/ and flow/).
    #[arg(long)]
    pub input: PathBuf,
    /// TOML config; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_frames: Option<usize>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Scene script (TOML); the default scene when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Camera-to-world pose, TUM order.
    #[arg(
        long,
        num_args = 7,
        allow_negative_numbers = true,
        value_names = ["TX", "TY", "TZ", "QX", "QY", "QZ", "QW"],
        conflicts_with = "frame",
        required_unless_present = "frame"
    )]
    pub pose: Option<Vec<f64>>,
    /// Use the estimated pose, exposure and time of this frame.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Normalized time in [0, 1]; defaults to the frame's time, or 0.
    #[arg(long, allow_negative_numbers = true)]
    pub time: Option<f64>,
    /// Target time of the flow channel; defaults to one frame later.
    #[arg(long, allow_negative_numbers = true)]
    pub flow_to: Option<f64>,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Output directory of `dynsplat run`.
    #[arg(long)]
    pub run: PathBuf,
    /// Sequence with ground truth.
    #[arg(long)]
    pub gt: PathBuf,
}

/// Bad input or arguments.
const EXIT_USER: u8 = 1;
/// Bug or numerical breakdown.
const EXIT_INTERNAL: u8 = 2;

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DYNSPLAT_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            anyhow::anyhow!("DYNSPLAT_THREADS must be a positive integer, got {v:?}")
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USER)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USER);
    }
    let result = std::panic::catch_unwind(|| match cli.command {
        Command::Run(a) => commands::run(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
    });
    match result {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USER)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
