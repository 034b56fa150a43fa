use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "regverify",
    about = "Verify 2D/3D registration results with an explainable classifier",
    disable_version_flag = true,
    arg_required_else_help = true
)]
pub struct Cli {
    /// Print name and version as JSON and exit.
    #[arg(long, global = false)]
    pub version: bool,

    /// Log level (error, warn, info, debug, trace); RUST_LOG also works.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a labeled phantom dataset.
    Generate(GenerateArgs),
    /// Train a verifier on one leave-one-specimen-out fold.
    Train(TrainArgs),
    /// Fit the conformal threshold of a trained checkpoint.
    Calibrate(CalibrateArgs),
    /// Cross-validate over all leave-one-specimen-out folds.
    Evaluate(EvaluateArgs),
    /// Write the Grad-CAM heatmap and prediction set for one case.
    Explain(ExplainArgs),
    /// Serve the review-study API.
    Serve(ServeArgs),
    /// Export scored review-study results.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size dataset and model.
    Default,
    /// Small separable dataset at 32 px with a 20-epoch budget.
    Toy,
}

/// Configuration sources. Precedence: flags > `--config`/`--preset` >
/// the config recorded with the input dataset > built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, value_name = "FILE", conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in configuration to start from.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// mTRE acceptance threshold in mm.
    #[arg(long, value_name = "MM")]
    pub threshold_mm: Option<f64>,
    /// Conformal miscoverage level.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "LR")]
    pub learning_rate: Option<f64>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub specimens: Option<usize>,
    #[arg(long)]
    pub projections: Option<usize>,
    #[arg(long)]
    pub samples_per_projection: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and training history.
    #[arg(long)]
    pub out: PathBuf,
    /// Fold index (folds follow sorted specimen ids).
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Calibration file to write [default: calibration.json next to the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub train: TrainOverrides,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Only run these folds (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub folds: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Sample uid (`specimen/projection/sample`).
    #[arg(long)]
    pub case: String,
    /// Heatmap PNG to write; the prediction set goes to the same path with a
    /// `.json` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset directory [default: the one the checkpoint was trained on].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// [default: calibration.json next to the checkpoint]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Explain this label instead of the predicted one.
    #[arg(long, value_parser = ["ACCEPT", "REJECT"])]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// [default: calibration.json next to the checkpoint]
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Case bank and session logs live here.
    #[arg(long, default_value = "review-state")]
    pub state: PathBuf,
    #[arg(long)]
    pub cases_per_category: Option<usize>,
    /// Reuse the same cases in every condition.
    #[arg(long)]
    pub share_cases: bool,
    /// Build the case bank and exit without serving.
    #[arg(long)]
    pub prepare_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportTable {
    Summary,
    Decisions,
    Surveys,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// State directory of a review server.
    #[arg(long)]
    pub state: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ExportFormat,
    /// CSV table to write.
    #[arg(long, value_enum, default_value = "summary")]
    pub table: ExportTable,
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub participant: Option<String>,
    #[arg(long)]
    pub completed_only: bool,
}
