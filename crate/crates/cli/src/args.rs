use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(
    name = "protogate",
    version,
    about = "Global-to-local feature selection with prototype-based prediction",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV plus a ground-truth sidecar.
    GenSynth(GenSynthArgs),
    /// Train on one split and evaluate on its held-out fold.
    Train(RunArgs),
    /// Repeated k-fold cross-validation of one configuration.
    Cv(RunArgs),
    /// Grid search over training configurations, scored on validation sets.
    Grid(GridArgs),
    /// Explain predictions of a trained model for new queries.
    Explain(ExplainArgs),
    /// Run the built-in numerical verification suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Syn1,
    Syn2,
    Syn3,
}

impl From<Kind> for protogate::data::SynKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Syn1 => Self::Syn1,
            Kind::Syn2 => Self::Syn2,
            Kind::Syn3 => Self::Syn3,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    /// Synthetic family.
    #[arg(long, value_enum)]
    pub kind: Kind,
    /// Root seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives `<kind>.csv` and `<kind>.truth.json`.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Samples with threshold label 0.
    #[arg(long, default_value_t = 150)]
    pub class_one: usize,
    /// Samples with threshold label 1.
    #[arg(long, default_value_t = 50)]
    pub class_two: usize,
    /// Number of features.
    #[arg(long, default_value_t = 100)]
    pub features: usize,
    /// Name of the label column.
    #[arg(long, default_value = "y")]
    pub label_col: String,
}

/// Data and split selection shared by the training commands. Values given
/// here override those of `--config`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Experiment manifest (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV dataset.
    #[arg(long, conflicts_with = "kind")]
    pub dataset: Option<PathBuf>,
    /// Label column of `--dataset`. [default: y]
    #[arg(long)]
    pub label_col: Option<String>,
    /// Columns of `--dataset` to ignore (repeatable).
    #[arg(long = "drop-col")]
    pub drop_col: Vec<String>,
    /// Ground-truth sidecar for `--dataset`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Generate a synthetic dataset instead of reading a CSV.
    #[arg(long, value_enum)]
    pub kind: Option<Kind>,
    /// Root seed for data generation, splits and training. [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory. [default: out]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Cross-validation folds. [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
    /// Cross-validation repeats. [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Fraction of each training fold held out for validation. [default: 0.1]
    #[arg(long)]
    pub val_frac: Option<f64>,
}

/// Training hyperparameters; unset values come from `--config` or the
/// defaults shown.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Weight of the l1 penalty on the first selector layer. [default: 0.01]
    #[arg(long)]
    pub lambda_global: Option<f64>,
    /// Weight of the expected local mask size. [default: 0]
    #[arg(long)]
    pub lambda_local: Option<f64>,
    /// Nearest prototypes per prediction. [default: 3]
    #[arg(long)]
    pub k: Option<usize>,
    /// SGD step size. [default: 0.1]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Weight decay on every tensor. [default: 0.0001]
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Mini-batch size. [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Iteration budget. [default: 10000]
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Iterations without validation improvement before stopping. [default: 500]
    #[arg(long)]
    pub patience: Option<usize>,
    /// Standard deviation of the gate noise. [default: 0.5]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Temperature of the relaxed sort. [default: 16]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Hidden width of the selector. [default: 100]
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Iterations between validation passes. [default: 1]
    #[arg(long)]
    pub eval_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Also evaluate the in-repo baselines (cv only).
    #[arg(long)]
    pub baselines: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridPreset {
    /// 9 configurations for the synthetic benchmarks.
    Synthetic,
    /// 75 configurations for real-world data.
    RealWorld,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Built-in grid; ignored when the manifest defines one.
    #[arg(long, value_enum, default_value_t = GridPreset::Synthetic)]
    pub grid: GridPreset,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prototype base written by `train`.
    #[arg(long)]
    pub base: PathBuf,
    /// CSV of raw (unnormalised) query rows.
    #[arg(long)]
    pub queries: PathBuf,
    /// Column to ignore if present, e.g. a label. [default: y]
    #[arg(long, default_value = "y")]
    pub label_col: String,
    /// Further columns to ignore (repeatable).
    #[arg(long = "drop-col")]
    pub drop_col: Vec<String>,
    /// Output directory; receives `explanations.json`.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Root seed of the randomised checks.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Smaller workloads for a fast smoke run.
    #[arg(long)]
    pub quick: bool,
    /// Flip the sign of the tanh adjoint (harness self-test).
    #[arg(long, hide = true)]
    pub inject_tanh_fault: bool,
}
