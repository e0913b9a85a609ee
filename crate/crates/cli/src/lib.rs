//! The `octclass` command line.
//!
//! Exit codes: 0 on success, 1 for usage and configuration errors, 2 when a
//! command fails while running.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use octclass_core::models::Architecture;
use octclass_core::xai::Method;

mod commands;
pub mod config;

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs detected before work starts.
    Usage(String),
    /// Failure while the command was doing its work.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<octclass_core::Error> for CliError {
    fn from(e: octclass_core::Error) -> Self {
        use octclass_core::Error as E;
        let message = e.to_string();
        match e {
            E::InvalidConfig(_)
            | E::InvalidTrainConfig(_)
            | E::InvalidXaiConfig(_)
            | E::InvalidMixParams(_)
            | E::InvalidAlpha(_)
            | E::InvalidFractions(_)
            | E::InvalidSegmentCount(_)
            | E::ConfigMismatch(_)
            | E::MissingClassDir { .. }
            | E::UnknownFormat(_)
            | E::UnknownLayer(_)
            | E::NonSpatialLayer { .. }
            | E::IndexOutOfRange { .. } => CliError::Usage(message),
            _ => CliError::Runtime(message),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "octclass", version, about = "Retinal OCT classification: data, training, evaluation, explanations and serving")]
pub struct Cli {
    /// TOML run configuration; see configs/default.toml.
    #[arg(long, short = 'c', global = true, env = "OCTCLASS_CONFIG")]
    pub config: Option<PathBuf>,
    /// Increase log detail (-v debug, -vv trace).
    #[arg(long, short = 'v', global = true, action = ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan a class-per-directory dataset and write a stratified split manifest.
    PrepareData(PrepareDataArgs),
    /// Generate a synthetic 8-class dataset with a ready-made manifest.
    SynthData(SynthDataArgs),
    /// Train a model; writes checkpoint, history and validation report.
    Train(TrainArgs),
    /// Score a checkpoint on one split and write the classification report.
    Evaluate(EvaluateArgs),
    /// Explain one prediction with Grad-CAM, LIME or occlusion.
    Explain(ExplainArgs),
    /// Draw accuracy and loss curves from history CSV files.
    PlotCurves(PlotCurvesArgs),
    /// Tabulate reports next to published results.
    Compare(CompareArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Dataset directory (one sub-directory per class).
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Split manifest JSON; takes precedence over --data-root.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PrepareDataArgs {
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    /// Train,val,test fractions, e.g. 0.8,0.1,0.1.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub fractions: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Manifest path [default: <data-root>/manifest.json].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 800)]
    pub train: usize,
    #[arg(long, default_value_t = 100)]
    pub val: usize,
    #[arg(long, default_value_t = 100)]
    pub test: usize,
    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 0.06)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// xception_style, inceptionv3_style or tiny_cnn.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Option<Architecture>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub depth: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Sets the data, model and augmentation seeds together.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable CutMix/MixUp.
    #[arg(long)]
    pub no_augment: bool,
    /// Output directory [default: runs/<arch>].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// text, markdown or json.
    #[arg(long, default_value = "text")]
    pub format: String,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory [default: the checkpoint's directory].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// gradcam, lime or occlusion.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Class to explain, by name or index [default: the predicted class].
    #[arg(long)]
    pub class: Option<String>,
    /// Grad-CAM layer.
    #[arg(long)]
    pub layer: Option<String>,
    /// Occlusion patch side.
    #[arg(long)]
    pub patch_size: Option<usize>,
    /// Occlusion stride.
    #[arg(long)]
    pub stride: Option<usize>,
    /// Occlusion fill value.
    #[arg(long)]
    pub baseline_value: Option<f64>,
    /// LIME superpixel count.
    #[arg(long)]
    pub num_superpixels: Option<usize>,
    /// LIME perturbation count.
    #[arg(long)]
    pub num_samples: Option<usize>,
    /// LIME sampling seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra method parameters as a JSON object, applied last.
    #[arg(long)]
    pub params: Option<String>,
    /// Heatmap weight in the overlay.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value = "explanations")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PlotCurvesArgs {
    #[arg(required = true)]
    pub history: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// Report JSON files written by `train` or `evaluate`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    /// Leave out the published reference rows.
    #[arg(long)]
    pub no_prior: bool,
    #[arg(long, default_value = "markdown")]
    pub format: String,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long, env = "OCTCLASS_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "OCTCLASS_HOST")]
    pub host: Option<String>,
    #[arg(long, env = "OCTCLASS_PORT")]
    pub port: Option<u16>,
    #[arg(long, env = "OCTCLASS_EXPLAIN_TIMEOUT_S")]
    pub explain_timeout_s: Option<f64>,
    #[arg(long, env = "OCTCLASS_MAX_UPLOAD_MB")]
    pub max_upload_mb: Option<f64>,
    #[arg(long, env = "OCTCLASS_MAX_CONCURRENT_EXPLAINS")]
    pub max_concurrent_explains: Option<usize>,
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    s.parse().map_err(|e: octclass_core::Error| e.to_string())
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: octclass_core::Error| e.to_string())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("OCTCLASS_LOG")
        .format_timestamp_secs()
        .try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose);
    let command_line = args.iter().map(|a| a.to_string_lossy()).collect::<Vec<_>>().join(" ");
    match commands::dispatch(cli, &command_line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
