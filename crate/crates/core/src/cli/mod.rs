//! Command-line front end: `prepare`, `train`, `evaluate`, `sweep`, `synth`.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical
//! failure.

mod commands;
pub mod config;
mod workdir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{DataError, DiscountMode};
use crate::encoders::EncoderKind;
use crate::eval::{EvalError, SweepParam};
use crate::model::{BlockVariant, CheckpointError, LossWeight, ModelError};
use crate::tensor::TensorError;
use config::{parse_value, read_file, DataFormat, Overrides, RunConfig};

pub use workdir::WorkDirLock;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io(_) | DataError::Csv(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Io(e.to_string()),
            CheckpointError::Model(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "prl", version, about = "Reward-prompted next-item recommendation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Ingest, filter and split sessions, then build the prompt training set.
    Prepare,
    /// Train a model on prepared prompts.
    Train,
    /// Evaluate a checkpoint on the test split.
    Evaluate,
    /// Evaluate a checkpoint over a grid of inference rewards.
    Sweep,
    /// Write a synthetic session corpus.
    Synth,
}

/// Flags shared by all commands. Each maps onto one config key; any other
/// key can be set with `--set key=value`.
#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Work directory holding prepared data, checkpoints and reports.
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// Raw input for `prepare`.
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<DataFormat>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Output file for `synth` and `sweep`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub encoder: Option<EncoderKind>,
    #[arg(long, global = true)]
    pub block_variant: Option<BlockVariant>,
    #[arg(long, global = true)]
    pub loss_weight: Option<LossWeight>,
    /// Plain cross-entropy training without the prompt.
    #[arg(long, global = true)]
    pub baseline: bool,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<usize>,
    #[arg(long, global = true)]
    pub learning_rate: Option<f64>,
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true)]
    pub mu: Option<f64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Ranking cutoffs, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub discount_mode: Option<DiscountMode>,
    /// Swept parameter for `sweep`.
    #[arg(long, global = true)]
    pub param: Option<SweepParam>,
    /// Grid for `sweep`, comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    pub grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub sessions: Option<usize>,
    #[arg(long, global = true)]
    pub vocab: Option<usize>,
    /// Any config key, e.g. `--set train.batch_size=64`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

fn parse_format(s: &str) -> Result<DataFormat, String> {
    match s {
        "canonical" => Ok(DataFormat::Canonical),
        "challenge15" => Ok(DataFormat::Challenge15),
        "retailrocket" => Ok(DataFormat::Retailrocket),
        "synthetic" => Ok(DataFormat::Synthetic),
        other => Err(format!("unknown format `{other}` (canonical|challenge15|retailrocket|synthetic)")),
    }
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.display().to_string())
}

impl Options {
    /// Command-line values as dotted config keys.
    pub fn overrides(&self) -> Result<Overrides, CliError> {
        let mut out = Overrides::new();
        let mut put = |key: &str, value: Option<toml::Value>| {
            if let Some(v) = value {
                out.insert(key.to_owned(), v);
            }
        };
        let int = |v: usize| toml::Value::Integer(v as i64);
        let text = |v: &dyn std::fmt::Display| toml::Value::String(v.to_string());
        put("seed", self.seed.map(|v| toml::Value::Integer(v as i64)));
        put("paths.work_dir", self.work_dir.as_deref().map(path_value));
        put("paths.input", self.input.as_deref().map(path_value));
        put("paths.checkpoint", self.checkpoint.as_deref().map(path_value));
        put("paths.out", self.out.as_deref().map(path_value));
        put(
            "data.format",
            self.format.map(|f| toml::Value::try_from(f).expect("enum serializes")),
        );
        put("model.encoder", self.encoder.map(|v| text(&v)));
        put("model.block_variant", self.block_variant.map(|v| text(&v)));
        put("model.dim", self.dim.map(int));
        put("model.baseline", self.baseline.then_some(toml::Value::Boolean(true)));
        put("train.loss_weight", self.loss_weight.map(|v| text(&v)));
        put("train.epochs", self.epochs.map(int));
        put("train.max_steps", self.max_steps.map(int));
        put("train.learning_rate", self.learning_rate.map(toml::Value::Float));
        put("eval.mu", self.mu.map(toml::Value::Float));
        put("eval.epsilon", self.epsilon.map(toml::Value::Float));
        put("eval.runs", self.runs.map(int));
        put(
            "eval.ks",
            self.ks.as_ref().map(|ks| toml::Value::Array(ks.iter().map(|&k| int(k)).collect())),
        );
        put("reward.lambda", self.lambda.map(toml::Value::Float));
        put("reward.discount_mode", self.discount_mode.map(|v| text(&v)));
        put("sweep.param", self.param.map(|v| text(&v)));
        put(
            "sweep.grid",
            self.grid
                .as_ref()
                .map(|g| toml::Value::Array(g.iter().map(|&v| toml::Value::Float(v)).collect())),
        );
        put("synth.sessions", self.sessions.map(int));
        put("synth.vocab", self.vocab.map(int));
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got `{pair}`")))?;
            out.insert(k.trim().to_owned(), parse_value(v.trim()));
        }
        Ok(out)
    }

    /// Defaults, overlaid with the config file, overlaid with these flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(path) => read_file(path)?,
            None => Overrides::new(),
        };
        RunConfig::resolve(file, self.overrides()?)
    }
}

/// Parses arguments and runs one command. Help and version requests print
/// and return success.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            return Err(CliError::Validation(text.trim_end().to_owned()));
        }
    };
    let config = cli.options.resolve()?;
    match cli.command {
        Command::Prepare => commands::prepare(&config),
        Command::Train => commands::train(&config),
        Command::Evaluate => commands::evaluate(&config),
        Command::Sweep => commands::sweep(&config),
        Command::Synth => commands::synth(&config),
    }
}
