//! `hsic`: train, classify and evaluate hyperspectral scenes from the shell.

mod commands;
mod manifest;
mod palette;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsic_core::data::{Interleave, RawType};
use hsic_core::train::NormalizationMode;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Diverged(String),
}

impl CliError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Data(format!("{}: {err}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Diverged(m) => f.write_str(m),
        }
    }
}

impl From<hsic_core::Error> for CliError {
    fn from(e: hsic_core::Error) -> Self {
        use hsic_core::Error as E;
        match &e {
            _ if e.is_divergence() => CliError::Diverged(e.to_string()),
            E::InvalidArgument(_) | E::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "hsic", version, about = "Spectral-spatial hyperspectral classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labeled scene (cube.bin, gt.bin)
    Synth(SynthArgs),
    /// Convert a raw headerless dump into the cube format
    Convert(ConvertArgs),
    /// Normalize a cube to zero mean and unit variance
    Normalize(NormalizeArgs),
    /// Draw a per-class train/test split
    Split(SplitArgs),
    /// Train the network and class centers
    Train(TrainArgs),
    /// Map every pixel of a cube to its feature vector
    Extract(ExtractArgs),
    /// Label the Test pixels of a feature map
    Classify(ClassifyArgs),
    /// Accuracy metrics of a prediction on the Test pixels
    Evaluate(EvaluateArgs),
    /// Render a prediction or ground truth as a PNG
    ExportMap(ExportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    /// Class mean offset in units of the noise deviation
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Multiplicative speckle strength, 0 for none
    #[arg(long, default_value_t = 0.0)]
    pub speckle: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum DType {
    F32,
    F64,
    U16,
}

impl From<DType> for RawType {
    fn from(d: DType) -> Self {
        match d {
            DType::F32 => RawType::F32,
            DType::F64 => RawType::F64,
            DType::U16 => RawType::U16,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Layout {
    Bip,
    Bsq,
    Bil,
}

impl From<Layout> for Interleave {
    fn from(l: Layout) -> Self {
        match l {
            Layout::Bip => Interleave::Bip,
            Layout::Bsq => Interleave::Bsq,
            Layout::Bil => Interleave::Bil,
        }
    }
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Raw little-endian sample dump
    #[arg(long)]
    pub raw: PathBuf,
    #[arg(long)]
    pub height: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub bands: usize,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: DType,
    #[arg(long, value_enum, default_value = "bip")]
    pub interleave: Layout,
    /// Raw u16 little-endian label image, 0 = unlabeled
    #[arg(long, requires = "gt_out")]
    pub labels: Option<PathBuf>,
    /// Class names, one per line
    #[arg(long, requires = "labels")]
    pub class_names: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub gt_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Norm {
    PerBand,
    Global,
}

impl From<Norm> for NormalizationMode {
    fn from(n: Norm) -> Self {
        match n {
            Norm::PerBand => NormalizationMode::PerBand,
            Norm::Global => NormalizationMode::Global,
        }
    }
}

#[derive(Args)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long, value_enum, default_value = "per-band")]
    pub normalization: Norm,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub gt: PathBuf,
    /// Training pixels drawn from every class
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Existing split; drawn from `real_per_class` when absent
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// `key = value` training configuration
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Run directory written by `train`
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// scc, sscc:<scale> or asscc
    #[arg(long, default_value = "asscc")]
    pub mode: String,
    /// Comma-separated odd window sizes for asscc
    #[arg(long)]
    pub scales: Option<String>,
    /// Per-pixel, per-scale vote CSV (asscc only)
    #[arg(long)]
    pub dump_votes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: PathBuf,
    /// Metrics CSV; printed to stdout when absent
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExportArgs {
    /// Prediction map
    #[arg(long, conflicts_with = "gt", required_unless_present = "gt")]
    pub pred: Option<PathBuf>,
    /// Ground truth instead of a prediction
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// One `#rrggbb` or `r,g,b` line per class
    #[arg(long)]
    pub palette: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Convert(a) => commands::convert(&a),
        Command::Normalize(a) => commands::normalize(&a),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Classify(a) => commands::classify(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::ExportMap(a) => commands::export_map(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
