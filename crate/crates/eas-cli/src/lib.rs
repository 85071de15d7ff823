//! Experiment harness over the core library: instance-set generation, policy
//! training, search benchmarking against oracles, hyperparameter sweeps, and
//! emission of plot-ready CSV and JSON-lines data. No graphics code ships
//! here; every artifact is consumable by any plotting tool.

pub mod commands;
pub mod report;
pub mod stats;
pub mod table;

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context, Result};
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use eas_core::autodiff::Real;
use eas_core::model::ModelConfig;
use eas_core::problems::ProblemKind;
use eas_core::search::{SearchConfig, SearchError, Strategy};
use eas_core::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Generate an instance file.
    Gen,
    /// Train a checkpoint from scratch.
    Train,
    /// Benchmark one strategy over an instance file.
    Search,
    /// Run one search per value of a hyperparameter.
    Sweep,
    /// Aggregate finished runs into summary and plot data.
    Report,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Search => "search",
            Command::Sweep => "sweep",
            Command::Report => "report",
        }
    }
}

/// Hyperparameters a sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Sigma,
    Alpha,
    Lr,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Sigma => "sigma",
            SweepParam::Alpha => "alpha",
            SweepParam::Lr => "lr",
        }
    }

    /// Whether the configured strategy reads this parameter at all.
    pub fn applies_to(self, config: &SearchConfig) -> bool {
        match self {
            SweepParam::Lambda => match config.strategy {
                Strategy::EasEmb | Strategy::EasLay => true,
                Strategy::ActiveSearch => config.active_search_il,
                _ => false,
            },
            SweepParam::Sigma | SweepParam::Alpha => config.strategy == Strategy::EasTab,
            SweepParam::Lr => matches!(
                config.strategy,
                Strategy::EasEmb | Strategy::EasLay | Strategy::ActiveSearch
            ),
        }
    }

    pub fn set(self, config: &mut SearchConfig, value: f64) {
        match self {
            SweepParam::Lambda => config.lambda = value as Real,
            SweepParam::Sigma => config.sigma = value as Real,
            SweepParam::Alpha => config.alpha = value as Real,
            SweepParam::Lr => config.lr = value as Real,
        }
    }
}

/// Echo of a run's exact configuration; written as config.json into the
/// output directory before artifacts are produced.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
}

pub fn write_config(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    let path = dir.join("config.json");
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// Runs `f` inside a worker pool sized by the EAS_THREADS environment
/// variable when it is set; the default global pool otherwise.
pub fn with_workers<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match env::var("EAS_THREADS") {
        Ok(raw) => {
            let threads: usize = raw
                .parse()
                .map_err(|_| anyhow!("EAS_THREADS must be a positive integer, got {raw:?}"))?;
            ensure!(threads > 0, "EAS_THREADS must be positive");
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

fn parse_kind(s: &str) -> std::result::Result<ProblemKind, String> {
    match s {
        "tsp" => Ok(ProblemKind::Tsp),
        "cvrp" => Ok(ProblemKind::Cvrp),
        other => Err(format!("unknown problem kind {other:?}; expected tsp or cvrp")),
    }
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: SearchError| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "eas", version, about = "Experiment harness for construction-policy search")]
pub struct Args {
    /// What to run.
    #[arg(long, value_enum)]
    pub cmd: Command,
    /// Problem family (tsp or cvrp), for gen and train.
    #[arg(long, value_parser = parse_kind)]
    pub kind: Option<ProblemKind>,
    /// Problem size: node count for TSP, customer count for CVRP.
    #[arg(long)]
    pub n: Option<usize>,
    /// Instances to generate.
    #[arg(long)]
    pub count: Option<usize>,
    /// Instance file (JSON lines).
    #[arg(long)]
    pub instances: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// greedy, sampling, active-search, eas-emb, eas-lay, or eas-tab.
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<Strategy>,
    /// Search iterations (greedy always runs one).
    #[arg(long)]
    pub iters: Option<usize>,
    /// Coordinate views per iteration, 1 to 8.
    #[arg(long)]
    pub augs: Option<usize>,
    /// Rollout starts per view; defaults to every valid start node.
    #[arg(long)]
    pub starts: Option<usize>,
    /// Imitation weight on the incumbent.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Steepness of the tabular rescore.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Strength of a tabular incumbent edge.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Learning rate (search or training).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Independent adaptation runs per instance sharing one incumbent.
    #[arg(long)]
    pub copies: Option<usize>,
    /// Master seed; every random stream derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output: a file for gen, a directory for everything else.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Optimizer steps (train).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Instances per optimizer step (train).
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Validation set size (train).
    #[arg(long)]
    pub val_size: Option<usize>,
    /// Steps between validation records (train).
    #[arg(long)]
    pub cadence: Option<usize>,
    /// Embedding width (train).
    #[arg(long)]
    pub dim: Option<usize>,
    /// Adapter hidden width (train).
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Logit clipping constant (train).
    #[arg(long)]
    pub clip: Option<f64>,
    /// Hyperparameter to sweep.
    #[arg(long, value_enum)]
    pub param: Option<SweepParam>,
    /// Comma-separated sweep values.
    #[arg(long)]
    pub values: Option<String>,
    /// Finished run directories to aggregate (report).
    #[arg(long, num_args = 1..)]
    pub runs: Vec<PathBuf>,
    /// Adds the imitation term to full fine-tuning.
    #[arg(long, default_value_t = false)]
    pub active_search_il: bool,
}

fn require<T>(value: Option<T>, flag: &str, cmd: &str) -> Result<T> {
    value.ok_or_else(|| anyhow!("--{flag} is required for --cmd {cmd}"))
}

fn parse_values(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| anyhow!("bad sweep value {s:?}")))
        .collect()
}

fn search_config(args: &Args) -> Result<SearchConfig> {
    let name = args.cmd.name();
    let strategy = require(args.strategy, "strategy", name)?;
    // The start count is a placeholder here; cmd_search resolves it against
    // the instance file when --starts is absent.
    let mut config = SearchConfig::standard(strategy, args.starts.unwrap_or(1));
    if let Some(v) = args.iters {
        config.iterations = v;
    }
    if let Some(v) = args.augs {
        config.augmentations = v;
    }
    if let Some(v) = args.lambda {
        config.lambda = v as Real;
    }
    if let Some(v) = args.alpha {
        config.alpha = v as Real;
    }
    if let Some(v) = args.sigma {
        config.sigma = v as Real;
    }
    if let Some(v) = args.lr {
        config.lr = v as Real;
    }
    if let Some(v) = args.copies {
        config.copies = v;
    }
    config.active_search_il = args.active_search_il;
    config.seed = args.seed;
    Ok(config)
}

pub fn run(args: &Args) -> Result<()> {
    let name = args.cmd.name();
    match args.cmd {
        Command::Gen => {
            let kind = require(args.kind, "kind", name)?;
            let n = require(args.n, "n", name)?;
            let count = require(args.count, "count", name)?;
            let out = require(args.out.clone(), "out", name)?;
            commands::cmd_gen(kind, n, count, args.seed, &out)
        }
        Command::Train => {
            let kind = require(args.kind, "kind", name)?;
            let n = require(args.n, "n", name)?;
            let out = require(args.out.clone(), "out", name)?;
            let model = ModelConfig::new(
                args.dim.unwrap_or(16),
                args.hidden.unwrap_or(16),
                args.clip.unwrap_or(10.0) as Real,
                kind,
            )?;
            let mut config = TrainConfig::standard(model, n);
            if let Some(v) = args.steps {
                config.steps = v;
            }
            if let Some(v) = args.batch_size {
                config.batch_size = v;
            }
            if let Some(v) = args.starts {
                config.starts = v;
            }
            if let Some(v) = args.lr {
                config.lr = v as Real;
            }
            if let Some(v) = args.val_size {
                config.val_size = v;
            }
            if let Some(v) = args.cadence {
                config.val_cadence = v;
            }
            config.seed = args.seed;
            commands::cmd_train(&config, &out)
        }
        Command::Search => {
            let instances = require(args.instances.clone(), "instances", name)?;
            let checkpoint = require(args.checkpoint.clone(), "checkpoint", name)?;
            let out = require(args.out.clone(), "out", name)?;
            let config = search_config(args)?;
            commands::cmd_search(&instances, &checkpoint, config, args.starts, &out).map(|_| ())
        }
        Command::Sweep => {
            let instances = require(args.instances.clone(), "instances", name)?;
            let checkpoint = require(args.checkpoint.clone(), "checkpoint", name)?;
            let out = require(args.out.clone(), "out", name)?;
            let param = require(args.param, "param", name)?;
            let raw = require(args.values.clone(), "values", name)?;
            let values = parse_values(&raw)?;
            let config = search_config(args)?;
            commands::cmd_sweep(&instances, &checkpoint, config, args.starts, param, &values, &out)
        }
        Command::Report => {
            ensure!(!args.runs.is_empty(), "--runs is required for --cmd report");
            let out = require(args.out.clone(), "out", name)?;
            let summary = report::cmd_report(&args.runs, &out, args.seed)?;
            print!("{summary}");
            Ok(())
        }
    }
}
