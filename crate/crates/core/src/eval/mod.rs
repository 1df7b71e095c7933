//! Prompted-reward inference, full-catalogue ranking and ranking metrics.

mod report;
mod sweep;

pub use report::{write_report_csv, write_report_text};
pub use sweep::{sweep, write_sweep_csv, SweepParam, SweepRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{padded_context, Behavior, RewardConfig, Session, StepRewardAverages};
use crate::model::{ModelError, PrlModel, PromptBatch};
use crate::rng::Rng;

pub const DEFAULT_KS: [usize; 3] = [5, 10, 20];
const INFERENCE_STREAM: u64 = 0x1_AFE2;
const SCORE_BATCH: usize = 256;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no evaluation steps: the test set is empty")]
    Empty,
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Prompt reward `R̃_t = g · R̄_t` with `g ~ N(mu, epsilon²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceRewardConfig {
    pub mu: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for InferenceRewardConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            epsilon: 0.0,
            seed: 0,
        }
    }
}

impl InferenceRewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(EvalError::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if !self.mu.is_finite() {
            return Err(EvalError::Config(format!("mu {} must be finite", self.mu)));
        }
        Ok(())
    }

    /// Generator of the per-step Gaussian factors.
    pub fn sampler(&self) -> Rng {
        Rng::stream(self.seed, INFERENCE_STREAM)
    }
}

/// One draw of `R̃_t`. With `epsilon == 0` the result is exactly `mu · R̄_t`.
pub fn inference_reward(step: usize, averages: &StepRewardAverages, config: &InferenceRewardConfig, rng: &mut Rng) -> f64 {
    let factor = if config.epsilon == 0.0 {
        // keep the stream aligned with the stochastic case
        rng.standard_normal();
        config.mu
    } else {
        rng.normal(config.mu, config.epsilon)
    };
    factor * averages.get(step)
}

/// Items `1..=n` ordered by descending logit, ties by ascending index.
pub fn rank_items(logits: &[f64]) -> Vec<u32> {
    let mut order: Vec<u32> = (1..=logits.len() as u32).collect();
    order.sort_by(|&a, &b| logits[b as usize - 1].total_cmp(&logits[a as usize - 1]));
    order
}

/// 1-based rank of `target` under the [`rank_items`] order, without sorting.
pub fn rank_of(logits: &[f64], target: u32) -> usize {
    let t = target as usize - 1;
    let y = logits[t];
    let above = logits
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > y || (v == y && i < t))
        .count();
    above + 1
}

/// `(hit, ndcg)` of a ground truth at `rank` for cutoff `k`.
pub fn hr_ndcg(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

/// HR@k and NDCG@k of one behavior, aligned with [`EvalReport::ks`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMetrics {
    pub steps: usize,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub purchase: BehaviorMetrics,
    pub click: BehaviorMetrics,
    /// Summed immediate reward of targets ranked first.
    pub cumulative_reward_at_1: f64,
    pub inference: InferenceRewardConfig,
    /// Number of evaluation runs averaged into this report.
    pub runs: usize,
}

impl EvalReport {
    pub fn metrics(&self, behavior: Behavior) -> &BehaviorMetrics {
        match behavior {
            Behavior::Click => &self.click,
            Behavior::Purchase => &self.purchase,
        }
    }

    /// `(hr, ndcg)` at cutoff `k`, if `k` was evaluated.
    pub fn at(&self, behavior: Behavior, k: usize) -> Option<(f64, f64)> {
        let i = self.ks.iter().position(|&x| x == k)?;
        let m = self.metrics(behavior);
        Some((m.hr[i], m.ndcg[i]))
    }

    /// Checks `0 <= NDCG@k <= HR@k <= 1` and monotonicity in `k`.
    pub fn is_consistent(&self) -> bool {
        let mut order: Vec<usize> = (0..self.ks.len()).collect();
        order.sort_by_key(|&i| self.ks[i]);
        [&self.purchase, &self.click].iter().all(|m| {
            let bounded = m
                .hr
                .iter()
                .zip(&m.ndcg)
                .all(|(&h, &n)| (0.0..=1.0).contains(&h) && n >= 0.0 && n <= h);
            let monotone = order
                .windows(2)
                .all(|w| m.hr[w[0]] <= m.hr[w[1]] && m.ndcg[w[0]] <= m.ndcg[w[1]]);
            bounded && monotone
        })
    }

    /// Element-wise mean of reports from repeated runs.
    pub fn mean(reports: &[EvalReport]) -> Option<EvalReport> {
        let first = reports.first()?;
        let avg = |f: &dyn Fn(&EvalReport) -> &BehaviorMetrics| BehaviorMetrics {
            steps: f(first).steps,
            hr: (0..first.ks.len())
                .map(|i| mean_of(reports.iter().map(|r| f(r).hr[i])))
                .collect(),
            ndcg: (0..first.ks.len())
                .map(|i| mean_of(reports.iter().map(|r| f(r).ndcg[i])))
                .collect(),
        };
        Some(EvalReport {
            ks: first.ks.clone(),
            purchase: avg(&|r| &r.purchase),
            click: avg(&|r| &r.click),
            cumulative_reward_at_1: mean_of(reports.iter().map(|r| r.cumulative_reward_at_1)),
            inference: first.inference,
            runs: reports.iter().map(|r| r.runs).sum(),
        })
    }
}

/// Arithmetic mean that returns the common value exactly when all inputs agree.
fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    if values.windows(2).all(|w| w[0] == w[1]) {
        return values[0];
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[derive(Debug, Clone)]
struct Accumulator {
    steps: usize,
    hits: Vec<u64>,
    ndcg: Vec<f64>,
}

impl Accumulator {
    fn new(n: usize) -> Self {
        Self {
            steps: 0,
            hits: vec![0; n],
            ndcg: vec![0.0; n],
        }
    }

    fn record(&mut self, rank: usize, ks: &[usize]) {
        self.steps += 1;
        for (i, &k) in ks.iter().enumerate() {
            let (h, n) = hr_ndcg(rank, k);
            self.hits[i] += h as u64;
            self.ndcg[i] += n;
        }
    }

    fn finish(self) -> BehaviorMetrics {
        let d = self.steps.max(1) as f64;
        BehaviorMetrics {
            steps: self.steps,
            hr: self.hits.iter().map(|&h| h as f64 / d).collect(),
            ndcg: self.ndcg.iter().map(|&v| v / d).collect(),
        }
    }
}

/// One evaluation step: predict `target` after `items[..step]`.
struct Step {
    context: [u32; crate::data::CONTEXT_LEN],
    step: usize,
    target: u32,
    behavior: Behavior,
}

fn steps_of(sessions: &[Session]) -> Vec<Step> {
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.len() {
            out.push(Step {
                context: padded_context(&s.items[..t]),
                step: t,
                target: s.items[t],
                behavior: s.behaviors[t],
            });
        }
    }
    out
}

/// Ranks the ground truth of every step `t = 1..T-1` of every session and
/// aggregates HR/NDCG per behavior of the target.
pub fn evaluate(
    model: &PrlModel,
    sessions: &[Session],
    averages: &StepRewardAverages,
    rewards: &RewardConfig,
    inference: &InferenceRewardConfig,
    ks: &[usize],
) -> Result<EvalReport> {
    inference.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(EvalError::Config("cutoffs must be a non-empty list of positive integers".into()));
    }
    let steps = steps_of(sessions);
    if steps.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = model.config().n_items;
    if let Some(s) = steps.iter().find(|s| s.target as usize > n) {
        return Err(EvalError::Config(format!("item {} outside the model's {n} items", s.target)));
    }
    let mut rng = inference.sampler();
    let mut purchase = Accumulator::new(ks.len());
    let mut click = Accumulator::new(ks.len());
    let mut reward_at_1 = 0.0;
    for chunk in steps.chunks(SCORE_BATCH) {
        let mut batch = PromptBatch::default();
        for s in chunk {
            batch.push(s.context, s.step, inference_reward(s.step, averages, inference, &mut rng));
        }
        let logits = model.score(&batch)?;
        for (s, row) in chunk.iter().zip(logits.chunks(n)) {
            let rank = rank_of(row, s.target);
            match s.behavior {
                Behavior::Purchase => purchase.record(rank, ks),
                Behavior::Click => click.record(rank, ks),
            }
            if rank == 1 {
                reward_at_1 += rewards.reward(s.behavior);
            }
        }
    }
    Ok(EvalReport {
        ks: ks.to_vec(),
        purchase: purchase.finish(),
        click: click.finish(),
        cumulative_reward_at_1: reward_at_1,
        inference: *inference,
        runs: 1,
    })
}

/// Mean of `runs` evaluations with inference seeds `seed, seed + 1, ...`.
pub fn evaluate_runs(
    model: &PrlModel,
    sessions: &[Session],
    averages: &StepRewardAverages,
    rewards: &RewardConfig,
    inference: &InferenceRewardConfig,
    ks: &[usize],
    runs: usize,
) -> Result<EvalReport> {
    if runs < 1 {
        return Err(EvalError::Config("runs must be at least 1".into()));
    }
    let reports = (0..runs as u64)
        .map(|i| {
            let cfg = InferenceRewardConfig {
                seed: inference.seed.wrapping_add(i),
                ..*inference
            };
            evaluate(model, sessions, averages, rewards, &cfg, ks)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::mean(&reports).expect("at least one run");
    report.inference = *inference;
    Ok(report)
}
