//! Run configuration: a TOML file whose keys are flattened to dotted paths,
//! overridden by command-line values. Precedence is CLI, then file, then
//! built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::data::{DiscountMode, FilterConfig, RewardConfig, SynthConfig};
use crate::encoders::EncoderKind;
use crate::eval::{InferenceRewardConfig, SweepParam, DEFAULT_KS};
use crate::model::{BlockVariant, LossWeight, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Session TSV as written by `synth` and `prepare`.
    #[default]
    Canonical,
    Challenge15,
    Retailrocket,
    /// Generated in place from the `synth` section.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub input: Option<PathBuf>,
    pub work_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            input: None,
            work_dir: PathBuf::from("work"),
            checkpoint: None,
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub min_len: usize,
    pub max_len: usize,
    pub min_item_count: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let f = FilterConfig::default();
        Self {
            format: DataFormat::default(),
            min_len: f.min_len,
            max_len: f.max_len,
            min_item_count: f.min_item_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub r_click: f64,
    pub r_purchase: f64,
    pub lambda: f64,
    pub discount_mode: DiscountMode,
}

impl Default for RewardSection {
    fn default() -> Self {
        let r = RewardConfig::default();
        Self {
            r_click: r.r_click,
            r_purchase: r.r_purchase,
            lambda: r.lambda,
            discount_mode: r.discount_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub vocab: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub purchase_bias: f64,
    pub click_fanout: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            vocab: s.vocab,
            sessions: s.sessions,
            min_len: s.min_len,
            max_len: s.max_len,
            purchase_bias: s.purchase_bias,
            click_fanout: s.click_fanout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub dim: usize,
    pub encoder: EncoderKind,
    pub block_variant: BlockVariant,
    pub layer_norm: bool,
    pub dropout: f64,
    /// Plain cross-entropy training: no prompt, mean pooling, unit weights.
    pub baseline: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            dim: m.dim,
            encoder: m.encoder,
            block_variant: m.block,
            layer_norm: m.layer_norm,
            dropout: m.dropout,
            baseline: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub max_steps: Option<usize>,
    pub loss_weight: LossWeight,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            max_steps: t.max_steps,
            loss_weight: t.loss_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mu: f64,
    pub epsilon: f64,
    pub ks: Vec<usize>,
    pub runs: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let i = InferenceRewardConfig::default();
        Self {
            mu: i.mu,
            epsilon: i.epsilon,
            ks: DEFAULT_KS.to_vec(),
            runs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub param: SweepParam,
    pub grid: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            param: SweepParam::Mu,
            grid: vec![0.0, 1.0, 2.0, 3.0, 4.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub data: DataSection,
    pub reward: RewardSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

/// Dotted key to value.
pub type Overrides = BTreeMap<String, toml::Value>;

fn flatten(prefix: &str, table: &toml::Table, out: &mut Overrides) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn unflatten(flat: &Overrides) -> Result<toml::Table, CliError> {
    let mut root = toml::Table::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut table = &mut root;
        for part in parts {
            let entry = table
                .entry(part.to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| CliError::Validation(format!("config key `{key}` conflicts with a value at `{part}`")))?;
        }
        if table.insert(last.to_owned(), value.clone()).is_some() {
            return Err(CliError::Validation(format!("config key `{key}` set twice")));
        }
    }
    Ok(root)
}

/// Parses `value` as a TOML literal, falling back to a plain string.
pub fn parse_value(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()))
}

/// Reads a config file into dotted keys.
pub fn read_file(path: &Path) -> Result<Overrides, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut out = Overrides::new();
    flatten("", &table, &mut out);
    Ok(out)
}

impl RunConfig {
    /// Defaults overlaid with `file`, then with `cli`.
    pub fn resolve(file: Overrides, cli: Overrides) -> Result<Self, CliError> {
        let mut merged = file;
        merged.extend(cli);
        let table = unflatten(&merged)?;
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |e: &dyn std::fmt::Display| CliError::Validation(e.to_string());
        self.rewards().validate().map_err(|e| invalid(&e))?;
        self.train_config().validate().map_err(|e| invalid(&e))?;
        self.inference().validate().map_err(|e| invalid(&e))?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Validation("eval.ks must list positive cutoffs".into()));
        }
        if self.eval.runs < 1 {
            return Err(CliError::Validation("eval.runs must be at least 1".into()));
        }
        if self.data.min_len < 2 || self.data.min_len > self.data.max_len {
            return Err(CliError::Validation(format!(
                "data length bounds [{}, {}] must satisfy 2 <= min <= max",
                self.data.min_len, self.data.max_len
            )));
        }
        // model checks need the item count, so use a placeholder of one item
        self.model_config(1).validate().map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn rewards(&self) -> RewardConfig {
        RewardConfig {
            r_click: self.reward.r_click,
            r_purchase: self.reward.r_purchase,
            lambda: self.reward.lambda,
            discount_mode: self.reward.discount_mode,
        }
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            min_len: self.data.min_len,
            max_len: self.data.max_len,
            min_item_count: self.data.min_item_count,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            vocab: self.synth.vocab,
            sessions: self.synth.sessions,
            min_len: self.synth.min_len,
            max_len: self.synth.max_len,
            purchase_bias: self.synth.purchase_bias,
            click_fanout: self.synth.click_fanout,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, n_items: usize) -> ModelConfig {
        let config = ModelConfig {
            n_items,
            dim: self.model.dim,
            encoder: self.model.encoder,
            block: self.model.block_variant,
            layer_norm: self.model.layer_norm,
            dropout: self.model.dropout,
            use_prompt: true,
        };
        if self.model.baseline {
            config.baseline()
        } else {
            config
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            max_steps: self.train.max_steps,
            loss_weight: if self.model.baseline {
                LossWeight::None
            } else {
                self.train.loss_weight
            },
            seed: self.seed,
        }
    }

    pub fn inference(&self) -> InferenceRewardConfig {
        InferenceRewardConfig {
            mu: self.eval.mu,
            epsilon: self.eval.epsilon,
            seed: self.seed,
        }
    }

    /// Everything except `paths`, as JSON with sorted keys.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("paths");
        v
    }

    /// SHA-256 of [`RunConfig::echo`], first 16 hex digits.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.echo().to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
