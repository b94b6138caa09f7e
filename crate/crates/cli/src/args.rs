use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use potsal::data::Split;
use potsal::eval::Experiment;
use potsal::rank::Method;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(
    name = "potsal",
    version,
    about = "Rank CNN filters by tail probability of their gradient saliency"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Train the built-in CNN or extract its saliency profiles.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Fit per-filter tail models to a profile matrix.
    Fit(FitArgs),
    /// Rank the filters of one sample.
    Rank(RankArgs),
    /// Run a pruning or fine-tuning sweep over misclassified samples.
    Eval(EvalArgs),
    /// Re-run a command from its run manifest and check the outputs match.
    #[serde(skip)]
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyCommand {
    /// Train from a seeded initialization on the synthetic train split.
    Train(TrainArgs),
    /// Saliency profiles of every sample of a split, in the profile format.
    Profiles(ProfilesArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Seed for weight initialization and shuffling.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    /// Seed of the synthetic training set.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, default_value_t = potsal::train::DEFAULT_TRAIN_SAMPLES)]
    pub train_samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ProfilesArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub num_samples: usize,
    /// Output directory for manifest.json and profiles.f32.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = potsal::tail::DEFAULT_QUANTILE, value_parser = parse_quantile)]
    pub quantile: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct RankArgs {
    /// Tail model written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub sample_index: usize,
    #[arg(long)]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, value_parser = parse_score_method)]
    pub method: Method,
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Defaults to standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub experiment: Experiment,
    #[arg(long)]
    pub method: Method,
    #[arg(long)]
    pub weights: PathBuf,
    /// Tail model; required for pot and zscore.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "shifted")]
    pub split: Split,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
    #[arg(long, default_value_t = 1000)]
    pub num_samples: usize,
    #[arg(long, default_value_t = potsal::eval::DEFAULT_MAX_FILTERS)]
    pub max_filters: usize,
    #[arg(long, default_value_t = potsal::eval::DEFAULT_LEARNING_RATE)]
    pub lr: f64,
    /// Quantile the tail model was fitted with.
    #[arg(long, default_value_t = potsal::tail::DEFAULT_QUANTILE, value_parser = parse_quantile)]
    pub quantile: f64,
    /// Random-baseline seeds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub seeds: Vec<u64>,
    /// Depth of the layer-group attribution table.
    #[arg(long, default_value_t = 20)]
    pub attribution_k: usize,
    /// Report CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Attribution CSV; defaults to the report path with an
    /// `.attribution.csv` suffix.
    #[arg(long)]
    pub attribution_out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args)]
pub struct ReplayArgs {
    /// A `.run.json` (or `run.json`) manifest written by another command.
    pub manifest: PathBuf,
}

fn parse_quantile(s: &str) -> Result<f64, String> {
    let q: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if q > 0.0 && q < 1.0 {
        Ok(q)
    } else {
        Err(format!("quantile must lie in (0, 1), got {q}"))
    }
}

fn parse_score_method(s: &str) -> Result<Method, String> {
    match s.parse::<Method>() {
        Ok(m @ (Method::Pot | Method::Zscore)) => Ok(m),
        Ok(m) => Err(format!("rank supports pot and zscore, not {m}")),
        Err(e) => Err(e.to_string()),
    }
}
