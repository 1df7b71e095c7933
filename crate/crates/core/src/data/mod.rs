//! Session ingestion, filtering, splitting and prompt generation.

mod filter;
mod ingest;
pub mod io;
mod prompts;
mod synth;

pub use filter::{compact_items, filter_sessions, split_dataset, FilterConfig};
pub use ingest::{ingest_events, EventLayout, EventRecord, IngestReport, Ingested};
pub use prompts::{
    compute_cumulative_rewards, cumulative_rewards, generate_prompts, session_prompts,
    StepRewardAverages,
};
pub use synth::{synth_corpus, SynthConfig, SynthWorld};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Contexts fed to the encoders hold the last `CONTEXT_LEN` items.
pub const CONTEXT_LEN: usize = 10;
/// Item index reserved for left padding.
pub const PAD: u32 = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no input events")]
    EmptyInput,
    #[error("all sessions were filtered out")]
    AllFiltered,
    #[error("need at least {needed} sessions to split, got {got}")]
    TooFewSessions { needed: usize, got: usize },
    #[error("discount factor {0} outside [0, 1]")]
    InvalidDiscount(f64),
    #[error("invalid reward config: {0}")]
    InvalidRewards(String),
    #[error("session `{id}` has {len} interactions; at least {min} required")]
    SessionTooShort { id: String, len: usize, min: usize },
    #[error("invalid session `{id}`: {reason}")]
    InvalidSession { id: String, reason: String },
    #[error("no training prompts")]
    NoPrompts,
    #[error("invalid synthetic corpus config: {0}")]
    InvalidSynth(String),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("missing column `{0}` in event header")]
    MissingColumn(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Click,
    Purchase,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Click => "click",
            Behavior::Purchase => "purchase",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "click" => Ok(Behavior::Click),
            "purchase" => Ok(Behavior::Purchase),
            other => Err(format!("unknown behavior `{other}`")),
        }
    }
}

/// One user's time-ordered interactions. Item indices start at 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub items: Vec<u32>,
    pub behaviors: Vec<Behavior>,
}

impl Session {
    pub fn new(id: impl Into<String>, items: Vec<u32>, behaviors: Vec<Behavior>) -> Result<Self> {
        let id = id.into();
        if items.len() != behaviors.len() {
            return Err(DataError::InvalidSession {
                id,
                reason: format!("{} items but {} behaviors", items.len(), behaviors.len()),
            });
        }
        if items.contains(&PAD) {
            return Err(DataError::InvalidSession {
                id,
                reason: "item index 0 is reserved for padding".into(),
            });
        }
        Ok(Self { id, items, behaviors })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Immediate rewards of the action steps `t = 1..T-1`: the reward of the
    /// behavior attached to the target item `x_{t+1}`.
    pub fn action_rewards(&self, config: &RewardConfig) -> Vec<f64> {
        self.behaviors.iter().skip(1).map(|&b| config.reward(b)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscountMode {
    /// `R_t = Σ_{t'≥t} λ^{t'} r_{t'}`: discount indexed by absolute step.
    #[default]
    Absolute,
    /// `R_t = Σ_{t'≥t} λ^{t'-t} r_{t'}`: discount relative to the current step.
    Relative,
}

impl FromStr for DiscountMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "absolute" => Ok(DiscountMode::Absolute),
            "relative" => Ok(DiscountMode::Relative),
            other => Err(format!("unknown discount mode `{other}` (absolute|relative)")),
        }
    }
}

impl fmt::Display for DiscountMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiscountMode::Absolute => "absolute",
            DiscountMode::Relative => "relative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_click: f64,
    pub r_purchase: f64,
    pub lambda: f64,
    pub discount_mode: DiscountMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_click: 0.2,
            r_purchase: 1.0,
            lambda: 0.5,
            discount_mode: DiscountMode::Absolute,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DataError::InvalidDiscount(self.lambda));
        }
        if !(self.r_click >= 0.0 && self.r_purchase >= self.r_click) || !self.r_purchase.is_finite() {
            return Err(DataError::InvalidRewards(format!(
                "need r_purchase >= r_click >= 0, got r_purchase={} r_click={}",
                self.r_purchase, self.r_click
            )));
        }
        Ok(())
    }

    pub fn reward(&self, behavior: Behavior) -> f64 {
        match behavior {
            Behavior::Click => self.r_click,
            Behavior::Purchase => self.r_purchase,
        }
    }
}

/// `{R_t, x_{1:t}, t} → x_{t+1}` with the immediate reward `r_t` attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub cumulative_reward: f64,
    /// Last `CONTEXT_LEN` items of `x_{1:t}`, left-padded with [`PAD`].
    pub context: [u32; CONTEXT_LEN],
    /// Untruncated position `t`, starting at 1.
    pub step: usize,
    pub action: u32,
    pub immediate_reward: f64,
    pub behavior: Behavior,
}

/// Left-pads the last `CONTEXT_LEN` entries of `prefix`.
pub fn padded_context(prefix: &[u32]) -> [u32; CONTEXT_LEN] {
    let mut ctx = [PAD; CONTEXT_LEN];
    let take = prefix.len().min(CONTEXT_LEN);
    ctx[CONTEXT_LEN - take..].copy_from_slice(&prefix[prefix.len() - take..]);
    ctx
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSplit {
    pub train: Vec<Session>,
    pub validation: Vec<Session>,
    pub test: Vec<Session>,
}

/// Largest item index across `sessions`.
pub fn max_item(sessions: &[Session]) -> u32 {
    sessions
        .iter()
        .flat_map(|s| s.items.iter().copied())
        .max()
        .unwrap_or(0)
}

/// Orders session ids numerically when both parse as integers, otherwise
/// lexicographically.
pub(crate) fn cmp_ids(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}
