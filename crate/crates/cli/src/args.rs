use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "seqenc", version, about = "Bidirectional recurrent sequence encoder for multi-temporal crop rasters")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset file.
    Generate(GenerateArgs),
    /// Train an encoder on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Export prediction, class activation and loss maps for one sample.
    Infer(InferArgs),
    /// Export per-step gate and state maps of selected cells.
    Activations(ActivationsArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    /// JSON file supplying any of these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub samples: usize,
    #[arg(long, default_value_t = 24)]
    pub tile: usize,
    #[arg(long, default_value_t = 13)]
    pub bands: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Observations per sample.
    #[arg(long, default_value_t = 30)]
    pub t: usize,
    #[arg(long, default_value_t = 2)]
    pub seasons: usize,
    #[arg(long, default_value_t = 0.2)]
    pub cloud_prob: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 5)]
    pub min_field: usize,
    /// Enables variable-length sequences with at least this many observations.
    #[arg(long)]
    pub min_obs: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub zipf: f64,
    /// Train:validation:test ratio.
    #[arg(long, default_value = "4:1:1")]
    pub ratio: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// rnn, lstm or gru.
    #[arg(long, default_value = "lstm")]
    pub cell: String,
    /// conv or dense.
    #[arg(long, default_value = "conv")]
    pub arrangement: String,
    #[arg(long, default_value_t = 32)]
    pub r: usize,
    #[arg(long, default_value_t = 3)]
    pub k_rnn: usize,
    #[arg(long, default_value_t = 3)]
    pub k_class: usize,
    /// relu or leaky_relu.
    #[arg(long, default_value = "leaky_relu")]
    pub activation: String,
    #[arg(long, default_value_t = 1.0)]
    pub forget_bias: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Observations kept per sample and step (0 keeps all).
    #[arg(long, default_value_t = 20)]
    pub n_keep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// sgd or adam.
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, validation or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Report the prediction-side conditional kappa instead of the reference-side one.
    #[arg(long)]
    pub precision_kappa: bool,
    /// Heatmap pixels per confusion-matrix entry.
    #[arg(long, default_value_t = 16)]
    pub cell_px: usize,
    /// Debug: predict the reference labels.
    #[arg(long, hide = true)]
    pub debug_perfect: bool,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct InferArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Index into the dataset (all splits).
    #[arg(long)]
    pub sample: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Debug: predict the reference labels.
    #[arg(long, hide = true)]
    pub debug_perfect: bool,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct ActivationsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub sample: usize,
    /// Comma-separated cell indices; all cells when omitted.
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
    /// Debug: cover the given observed step with a whole-frame cloud.
    #[arg(long)]
    pub inject_cloud: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub t: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub r: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub k_rnn: usize,
    #[arg(long, default_value_t = 3)]
    pub k_class: usize,
    /// Comma-separated cell types.
    #[arg(long, value_delimiter = ',', default_value = "gru,lstm")]
    pub cells: Vec<String>,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 256)]
    pub probes: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Debug: corrupt the analytic gradient of this op (e.g. head.bn).
    #[arg(long, hide = true)]
    pub inject_wrong_gradient: Option<String>,
    /// Directory for report.json and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
