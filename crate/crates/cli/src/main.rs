mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Asynchronous autoregressive video diffusion at desk scale.
#[derive(Debug, Parser)]
#[command(name = "ardiff", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for every file the command writes.
    #[arg(long, global = true, env = "ARDIFF_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count non-decreasing timestep compositions.
    Count(CountArgs),
    /// Write the AD trajectory plan as JSON lines.
    Plan(PlanArgs),
    /// Train the toy denoiser on synthetic latents.
    Train(TrainArgs),
    /// Sample a latent video from a checkpoint.
    Generate(GenerateArgs),
    /// Run a verification suite; exits 1 on any failure.
    Verify(VerifyArgs),
    /// Draw FoPP compositions and compare the histogram with the exact law.
    SampleComposition(SampleCompositionArgs),
}

#[derive(Debug, Args)]
pub struct CountArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub timesteps: u32,
    /// Binary count-table cache; read when present, written otherwise.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    /// Sampler grid size N.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub steps: u32,
    /// Inter-frame difference in grid units.
    #[arg(long = "s", default_value_t = 0)]
    pub diff: u32,
    /// Diffusion timesteps the grid maps onto (defaults to N).
    #[arg(long)]
    pub timesteps: Option<u32>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// `adam` or `sgd`.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Inter-frame difference in grid units.
    #[arg(long = "s")]
    pub diff: Option<usize>,
    /// Sampler grid size N.
    #[arg(long)]
    pub steps: Option<usize>,
    /// `recorrupt_deterministic`, `recorrupt_stochastic` or `posterior`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also dump the latent as `frame,token,dim,value` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// counting, scheduler, fopp, kernels, gradients, causality, sampling, training or all.
    pub suite: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleCompositionArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub timesteps: u32,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of individual draws to list before the histogram.
    #[arg(long, default_value_t = 10)]
    pub list: usize,
    /// Binary count-table cache; read when present, written otherwise.
    #[arg(long)]
    pub tables: Option<PathBuf>,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub const VERIFY_FAILED: u8 = 1;
    pub const USAGE: u8 = 2;

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: Self::USAGE,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: Self::VERIFY_FAILED,
            message: message.into(),
        }
    }
}

impl From<ardiff::Error> for CliError {
    fn from(e: ardiff::Error) -> Self {
        use ardiff::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::ShapeMismatch { .. }
            | E::TimestepOutOfRange { .. }
            | E::NotNonDecreasing { .. }
            | E::EnumerationCap { .. }
            | E::UnderpopulatedCell { .. }
            | E::Format(_) => Self::usage(e.to_string()),
            other => Self::failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config::RunConfig::load(cli.config.as_deref())?;
    let out_dir = cli
        .output_dir
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("ardiff-out"));
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Count(a) => commands::count(&a, &mut stdout),
        Command::Plan(a) => commands::plan(&a, &out_dir, &mut stdout),
        Command::Train(a) => commands::train(&a, cfg, &out_dir, &mut stdout),
        Command::Generate(a) => commands::generate(&a, cfg, &out_dir, &mut stdout),
        Command::Verify(a) => commands::verify(&a, &out_dir, &mut stdout),
        Command::SampleComposition(a) => commands::sample_composition(&a, &mut stdout),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
