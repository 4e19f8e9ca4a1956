//! Argument definitions and the value parsers behind them.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pathwayforge_core::pathway::Baseline;
use pathwayforge_core::store::DatasetInfo;
use pathwayforge_core::Epsilon;

#[derive(Debug, Parser)]
#[command(name = "pathwayforge", version, about = "Adversarial pathway analysis for a small inception network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier on the synthetic dataset.
    Train(TrainArgs),
    /// Attack one class pair over a sweep of strengths and create a run directory.
    Attack(AttackArgs),
    /// Build the pathway graph of a run and write graph.json.
    Extract(ExtractArgs),
    /// Render dataset patches and feature visualizations for every graph node.
    Explain(ExplainArgs),
    /// Write report.json and optionally publish the run for serving.
    Export(ExportArgs),
    /// Serve published runs over HTTP.
    Serve(ServeArgs),
    /// Run every stage with the frozen reference configuration.
    Reference(ReferenceArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Dataset generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of classes.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Images per class.
    #[arg(long)]
    pub per_class: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f32>,
    #[arg(long)]
    pub momentum: Option<f32>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Seed of the minibatch shuffle.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Weights file to write; a `.json` training record is written beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Weights written by `train`.
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset overrides; by default the training record beside the weights is used.
    #[command(flatten)]
    pub dataset: DatasetArgs,
    #[arg(long)]
    pub original: usize,
    #[arg(long)]
    pub target: usize,
    /// Strengths as `start:end:step` or a comma-separated list.
    #[arg(long, default_value = "0.05:0.5:0.05", value_parser = parse_epsilons)]
    pub eps: EpsilonList,
    #[arg(long, default_value_t = 40)]
    pub steps: usize,
    /// Step size as a multiple of `eps / steps`.
    #[arg(long, default_value_t = 2.5)]
    pub step_factor: f64,
    /// Seed of a uniform random start inside the ball; off by default.
    #[arg(long)]
    pub random_start: Option<u64>,
    #[arg(long, default_value_t = 100)]
    pub max_images: usize,
    /// Manifest timestamp; falls back to SOURCE_DATE_EPOCH, then the clock.
    #[arg(long)]
    pub created_at: Option<u64>,
    /// Directory that receives the `pair_<original>_<target>` run.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    Original,
    Target,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Original => Baseline::Original,
            BaselineArg::Target => Baseline::Target,
        }
    }
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Write the graph here instead of `<run>/graph.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub benign_k: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub attacked_k: u64,
    /// Benign set that excitation is measured against.
    #[arg(long, value_enum, default_value_t = BaselineArg::Original)]
    pub baseline: BaselineArg,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Top-activating dataset patches per node.
    #[arg(long, default_value_t = 5)]
    pub patches: usize,
    #[arg(long, default_value_t = 48)]
    pub fv_steps: usize,
    #[arg(long, default_value_t = 1.0)]
    pub fv_step_size: f64,
    #[arg(long, default_value_t = 0)]
    pub fv_seed: u64,
    #[arg(long, default_value_t = 4)]
    pub fv_backtracks: usize,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Data directory to publish the run into.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Directory of published runs; PATHWAYFORGE_DATA takes precedence.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Static front-end files served outside `/api` and `/assets`.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReferenceArgs {
    /// Working directory for weights and the run.
    #[arg(long)]
    pub work: PathBuf,
    /// Data directory to publish into.
    #[arg(long)]
    pub publish: Option<PathBuf>,
    #[arg(long)]
    pub created_at: Option<u64>,
}

/// Sorted, duplicate-free attack strengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpsilonList(pub Vec<Epsilon>);

pub fn parse_epsilons(s: &str) -> Result<EpsilonList, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let list = match parts.as_slice() {
        [start, end, step] => {
            let num = |v: &str| v.trim().parse::<f64>().map_err(|_| format!("{v:?} is not a number"));
            Epsilon::range(num(start)?, num(end)?, num(step)?).map_err(|e| e.to_string())?
        }
        [_] => {
            let mut v = s
                .split(',')
                .map(|p| p.parse::<Epsilon>().map_err(|e| e.to_string()))
                .collect::<Result<Vec<_>, _>>()?;
            v.sort();
            if v.windows(2).any(|w| w[0] == w[1]) {
                return Err("strengths repeat".into());
            }
            v
        }
        _ => return Err("expected start:end:step or a comma-separated list".into()),
    };
    Ok(EpsilonList(list))
}

/// Dataset of a command: flags, checked against the training record when both exist.
pub fn resolve_dataset(flags: &DatasetArgs, record: Option<&DatasetInfo>) -> Result<DatasetInfo, String> {
    let merge = |name: &str, flag: Option<u64>, rec: Option<u64>| match (flag, rec) {
        (Some(f), Some(r)) if f != r => Err(format!("--{name} {f} conflicts with the training record ({r})")),
        (Some(v), _) | (None, Some(v)) => Ok(v),
        (None, None) => Err(format!("--{name} is required when the weights have no training record")),
    };
    Ok(DatasetInfo {
        seed: merge("seed", flags.seed, record.map(|r| r.seed))?,
        num_classes: merge("classes", flags.classes.map(|v| v as u64), record.map(|r| r.num_classes as u64))? as usize,
        per_class: merge("per-class", flags.per_class.map(|v| v as u64), record.map(|r| r.per_class as u64))? as usize,
    })
}

/// Data directory to serve: the environment value wins over the flag.
pub fn resolve_data_dir(flag: Option<PathBuf>, env: Option<PathBuf>) -> Result<PathBuf, String> {
    env.filter(|p| !p.as_os_str().is_empty())
        .or(flag)
        .ok_or_else(|| "--data or PATHWAYFORGE_DATA is required".into())
}

/// Timestamp for a new manifest: the flag, else `SOURCE_DATE_EPOCH`, else `now`.
pub fn resolve_created_at(flag: Option<u64>, source_date_epoch: Option<&str>, now: u64) -> Result<u64, String> {
    if let Some(v) = flag {
        return Ok(v);
    }
    match source_date_epoch {
        Some(s) => s
            .trim()
            .parse()
            .map_err(|_| format!("SOURCE_DATE_EPOCH {s:?} is not a whole number of seconds")),
        None => Ok(now),
    }
}
