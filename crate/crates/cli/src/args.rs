use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use icdot::{FusionMode, OtConfig, SweepAxis, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "icdot", version, about = "Disease/procedure code embeddings with attention and optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Vocabulary sizes and per-admission code count histograms (JSON)
    Stats(StatsArgs),
    /// Train a model and write it with its vocabularies and metadata
    Train(TrainCmd),
    /// Top-L precision, recall and F1 of a model on a dataset
    Evaluate(EvaluateArgs),
    /// Recommend procedures for a set of disease codes
    Recommend(RecommendArgs),
    /// Disease significance and disease-to-procedure transport plans
    Explain(ExplainArgs),
    /// Train and evaluate one model per value of a hyperparameter
    Sweep(SweepArgs),
    /// k-fold cross-validation on the training split
    Cv(CvArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fusion {
    Mean,
    Max,
    Sa,
}

impl From<Fusion> for FusionMode {
    fn from(f: Fusion) -> Self {
        match f {
            Fusion::Mean => FusionMode::Mean,
            Fusion::Max => FusionMode::Max,
            Fusion::Sa => FusionMode::SelfAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    #[value(name = "M")]
    Dim,
    Alpha,
    #[value(name = "K")]
    Heads,
}

impl From<Axis> for SweepAxis {
    fn from(a: Axis) -> Self {
        match a {
            Axis::Dim => SweepAxis::Dim,
            Axis::Alpha => SweepAxis::Alpha,
            Axis::Heads => SweepAxis::Heads,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Admissions, one JSON object per line
    #[arg(long)]
    pub data: PathBuf,
    /// Keep codes occurring at least this many times
    #[arg(long, default_value_t = 1)]
    pub min_count: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Fraction of admissions held out for testing (0 trains on everything)
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Embedding dimension
    #[arg(long = "M", default_value_t = 200)]
    pub dim: usize,
    /// Attention heads
    #[arg(long = "K", default_value_t = 8)]
    pub heads: usize,
    /// Weight of the transport regularizer (0 disables it)
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 25)]
    pub epochs: usize,
    /// Admissions per minibatch
    #[arg(long, default_value_t = 300)]
    pub batch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fusion of disease embeddings
    #[arg(long, value_enum, default_value_t = Fusion::Sa)]
    pub fusion: Fusion,
    /// Worker threads (0 uses all cores)
    #[arg(long, env = "ICDOT_THREADS", default_value_t = 0)]
    pub threads: usize,
    /// Process admissions sequentially for bit-reproducible runs
    #[arg(long)]
    pub deterministic: bool,
    /// Scalar type for parameters and arithmetic
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Proximal weight of the transport solver
    #[arg(long, default_value_t = OtConfig::default().beta)]
    pub ot_beta: f64,
    /// Maximum proximal steps per transport solve
    #[arg(long, default_value_t = OtConfig::default().outer_max)]
    pub ot_outer: usize,
    /// Maximum Sinkhorn iterations per proximal step
    #[arg(long, default_value_t = OtConfig::default().inner_max)]
    pub ot_inner: usize,
    /// Sinkhorn stopping tolerance on marginal violation
    #[arg(long, default_value_t = OtConfig::default().inner_tol)]
    pub ot_inner_tol: f64,
    /// Proximal stopping tolerance on plan change
    #[arg(long, default_value_t = OtConfig::default().outer_tol)]
    pub ot_outer_tol: f64,
}

impl TrainArgs {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            heads: self.heads,
            alpha: self.alpha,
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            fusion: self.fusion.into(),
            ot: self.ot_config(),
            seed: self.seed,
            threads: self.threads,
            deterministic: self.deterministic,
            ..TrainConfig::default()
        }
    }

    pub fn ot_config(&self) -> OtConfig {
        OtConfig {
            beta: self.ot_beta,
            outer_max: self.ot_outer,
            inner_max: self.ot_inner,
            inner_tol: self.ot_inner_tol,
            outer_tol: self.ot_outer_tol,
            ..OtConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Model file to write
    #[arg(long)]
    pub out: PathBuf,
    /// Write the held-out admissions here (JSON lines)
    #[arg(long)]
    pub test_out: Option<PathBuf>,
    /// Write per-epoch training diagnostics here (JSON)
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Test admissions, one JSON object per line
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated list lengths
    #[arg(long = "L", value_delimiter = ',', default_value = "1,3,5,10")]
    pub tops: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Write per-admission metrics here (JSON lines)
    #[arg(long)]
    pub per_admission: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated disease codes
    #[arg(long, value_delimiter = ',', required = true)]
    pub diseases: Vec<String>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Explain admissions from this file (JSON lines)
    #[arg(long, conflicts_with = "diseases", required_unless_present = "diseases")]
    pub data: Option<PathBuf>,
    /// Only explain the admission with this id
    #[arg(long, requires = "data")]
    pub admission: Option<String>,
    /// Comma-separated disease codes of a single ad hoc admission
    #[arg(long, value_delimiter = ',')]
    pub diseases: Option<Vec<String>>,
    /// Number of recommended procedures to couple with
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    /// Code descriptions, `code<TAB>text` per line
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    /// Print the transport matrix as CSV instead of JSON
    #[arg(long)]
    pub csv: bool,
    #[arg(long, default_value_t = OtConfig::default().beta)]
    pub ot_beta: f64,
    #[arg(long, default_value_t = OtConfig::default().outer_max)]
    pub ot_outer: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Hyperparameter to vary
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values for the axis
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long = "L", value_delimiter = ',', default_value = "1,3,5,10")]
    pub tops: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// Run only this fold (0-based)
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long = "L", value_delimiter = ',', default_value = "1,3,5,10")]
    pub tops: Vec<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    pub format: Format,
}
