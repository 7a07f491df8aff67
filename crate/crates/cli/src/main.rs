mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Large-kernel depth-wise convolution toolkit: benchmarks, re-parameterization,
/// ERF analysis, FLOP accounting and inference.
#[derive(Debug, Parser)]
#[command(name = "rlk", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time stacks of same-padding depth-wise convolutions over a K x R grid.
    Bench(BenchArgs),
    /// Convert a model to deploy form, optionally verifying equivalence.
    Reparam(ReparamArgs),
    /// Measure the effective receptive field of a headless model.
    Erf(ErfArgs),
    /// Count parameters and multiply-accumulates.
    Flops(FlopsArgs),
    /// Classify one image and print the top classes.
    Run(RunArgs),
    /// Expand a dilated kernel into the equivalent dense kernel.
    Densify(DensifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Direct,
    Blocked,
    Fft,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForwardBackend {
    Direct,
    Blocked,
    Fft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AreaOn {
    Raw,
    Log,
}

#[derive(Debug, Args)]
pub struct Threads {
    /// Worker threads for the data-parallel engine.
    #[arg(long, env = "RLK_THREADS", default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 7, 9, 13, 17, 21, 27, 29, 31])]
    pub kernels: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [16usize, 32, 64])]
    pub resolutions: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 24)]
    pub layers: usize,
    #[arg(long, value_enum, default_value_t = BackendArg::Blocked)]
    pub backend: BackendArg,
    /// Timed repetitions (at least 5; 3 warm-up runs are always added).
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(5..))]
    pub reps: u32,
    /// Output tile edge of the blocked backend.
    #[arg(long, default_value_t = 8)]
    pub tile: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub threads: Threads,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelSource {
    /// Architecture JSON file or preset name (replknet-31b, replknet-31l,
    /// replknet-xl, replknet-3).
    #[arg(long)]
    pub arch: String,
    /// Weight container; when absent, weights are drawn from `--seed`.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReparamArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Where to write the deploy-form model.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Re-verify an existing deploy-form file instead of converting.
    #[arg(long, conflicts_with = "out")]
    pub fused: Option<PathBuf>,
    /// Save the (possibly random) training-form weights here.
    #[arg(long)]
    pub save_weights: Option<PathBuf>,
    /// Number of random inputs to compare both forms on (0 disables).
    #[arg(long, default_value_t = 0)]
    pub verify: usize,
    /// Spatial size of the verification inputs.
    #[arg(long, default_value_t = 64)]
    pub input_size: usize,
    #[arg(long, value_enum, default_value_t = ForwardBackend::Blocked)]
    pub backend: ForwardBackend,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct ErfArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, default_value_t = 256)]
    pub input_size: usize,
    /// Number of seeded noise inputs (ignored when --images is given).
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u32).range(1..))]
    pub samples: u32,
    /// Thresholds in percent.
    #[arg(long, value_delimiter = ',', default_values_t = [20.0f64, 30.0, 50.0, 99.0])]
    pub thresholds: Vec<f64>,
    /// Integrate the area ratio on the raw gradient mass or on the log map.
    #[arg(long, value_enum, default_value_t = AreaOn::Raw)]
    pub area_on: AreaOn,
    /// PGM/PPM images to use instead of noise.
    #[arg(long, value_delimiter = ',')]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ForwardBackend::Blocked)]
    pub backend: ForwardBackend,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 224)]
    pub resolution: usize,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Binary PPM (P6) or PGM (P5) image.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = ForwardBackend::Blocked)]
    pub backend: ForwardBackend,
    #[command(flatten)]
    pub threads: Threads,
}

#[derive(Debug, Args)]
pub struct DensifyArgs {
    /// Size of the dilated kernel.
    #[arg(long)]
    pub kernel: usize,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub dilation: u32,
    /// Container with the kernels to expand; when absent a random kernel is used.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Channels of the random kernel.
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 1;
    pub const RUNTIME: u8 = 2;
    pub const VERIFY: u8 = 3;
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.code())
        }
    }
}
