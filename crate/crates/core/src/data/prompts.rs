use std::collections::BTreeMap;

use super::{padded_context, DataError, DiscountMode, PromptSample, Result, RewardConfig, Session};

/// Cumulative rewards `R_1..R_{T-1}` of a session, computed in one pass.
///
/// Absolute mode computes `R_1` once and then walks forward with
/// `R_{t+1} = R_t - λ^t r_t`. Relative mode walks backward with
/// `R_t = r_t + λ R_{t+1}`.
pub fn compute_cumulative_rewards(session: &Session, config: &RewardConfig) -> Result<Vec<f64>> {
    if session.len() < 2 {
        return Err(DataError::SessionTooShort {
            id: session.id.clone(),
            len: session.len(),
            min: 2,
        });
    }
    cumulative_rewards(&session.action_rewards(config), config.lambda, config.discount_mode)
}

/// Same as [`compute_cumulative_rewards`] over raw immediate rewards
/// `r_1..r_n` (index 0 holds `r_1`).
pub fn cumulative_rewards(rewards: &[f64], lambda: f64, mode: DiscountMode) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(DataError::InvalidDiscount(lambda));
    }
    let n = rewards.len();
    let mut out = vec![0.0; n];
    match mode {
        DiscountMode::Absolute => {
            let mut total = 0.0;
            let mut discount = 1.0;
            for &r in rewards {
                discount *= lambda;
                total += discount * r;
            }
            // the subtraction can leave rounding residue below zero
            let floor = if rewards.iter().all(|&r| r >= 0.0) { 0.0 } else { f64::NEG_INFINITY };
            let mut discount = 1.0;
            for (t, &r) in rewards.iter().enumerate() {
                out[t] = total.max(floor);
                discount *= lambda;
                total -= discount * r;
            }
        }
        DiscountMode::Relative => {
            let mut next = 0.0;
            for t in (0..n).rev() {
                next = rewards[t] + lambda * next;
                out[t] = next;
            }
        }
    }
    Ok(out)
}

/// Prompt samples of one session: `T - 1` of them for a length-`T` session.
pub fn session_prompts(session: &Session, config: &RewardConfig) -> Result<Vec<PromptSample>> {
    if session.len() < 2 {
        return Ok(Vec::new());
    }
    let returns = compute_cumulative_rewards(session, config)?;
    Ok((1..session.len())
        .map(|t| {
            let behavior = session.behaviors[t];
            PromptSample {
                cumulative_reward: returns[t - 1],
                context: padded_context(&session.items[..t]),
                step: t,
                action: session.items[t],
                immediate_reward: config.reward(behavior),
                behavior,
            }
        })
        .collect())
}

/// Converts sessions into the prompt-based training set.
pub fn generate_prompts(sessions: &[Session], config: &RewardConfig) -> Result<Vec<PromptSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(sessions.iter().map(|s| s.len().saturating_sub(1)).sum());
    for s in sessions {
        out.extend(session_prompts(s, config)?);
    }
    Ok(out)
}

/// Average training cumulative reward per step, `R̄_t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepRewardAverages {
    table: BTreeMap<usize, f64>,
}

impl StepRewardAverages {
    pub fn from_prompts(prompts: &[PromptSample]) -> Result<Self> {
        if prompts.is_empty() {
            return Err(DataError::NoPrompts);
        }
        let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for p in prompts {
            by_step.entry(p.step).or_default().push(p.cumulative_reward);
        }
        let table = by_step
            .into_iter()
            .map(|(step, mut values)| {
                // fixed summation order makes the mean independent of input order
                values.sort_by(f64::total_cmp);
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                (step, mean)
            })
            .collect();
        Ok(Self { table })
    }

    pub fn from_table(entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let table: BTreeMap<usize, f64> = entries.into_iter().collect();
        if table.is_empty() {
            return Err(DataError::NoPrompts);
        }
        Ok(Self { table })
    }

    /// `R̄_t`; steps missing from training fall back to the nearest smaller
    /// populated step (or the smallest one when none is smaller).
    pub fn get(&self, step: usize) -> f64 {
        self.table
            .range(..=step)
            .next_back()
            .or_else(|| self.table.iter().next())
            .map(|(_, &v)| v)
            .unwrap_or(0.0)
    }

    pub fn contains(&self, step: usize) -> bool {
        self.table.contains_key(&step)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.table.iter().map(|(&k, &v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}
