//! Synthetic corpora with a known reward-tier structure.
//!
//! Items `1..=vocab/2` are click items and the rest are purchase items. From
//! any item `i` the high tier continues to the purchase item `high[i]`; the
//! low tier continues to one of `click_fanout` click items `low[i][..]`. The
//! logging policy takes the high tier with probability `purchase_bias` and
//! otherwise picks a low continuation uniformly.

use serde::{Deserialize, Serialize};

use super::{Behavior, DataError, Result, Session};
use crate::rng::Rng;

const WORLD_STREAM: u64 = 0x0030_171D;
const SESSION_STREAM: u64 = 0x5E55_1045;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab: usize,
    pub sessions: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub purchase_bias: f64,
    pub click_fanout: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab: 50,
            sessions: 1000,
            min_len: 3,
            max_len: 10,
            purchase_bias: 0.5,
            click_fanout: 1,
            seed: 0,
        }
    }
}

/// Transition tables of a synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    /// `high[i]` is the purchase continuation of item `i` (index 0 unused).
    pub high: Vec<u32>,
    /// `low[i]` lists the click continuations of item `i`.
    pub low: Vec<Vec<u32>>,
    pub click_items: u32,
}

impl SynthWorld {
    pub fn is_purchase_item(&self, item: u32) -> bool {
        item > self.click_items
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::InvalidSynth(m.to_owned()));
        if self.vocab < 4 {
            return bad("vocab must be at least 4");
        }
        if self.sessions < 1 {
            return bad("need at least one session");
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad("session lengths need 2 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.purchase_bias) {
            return bad("purchase_bias must lie in [0, 1]");
        }
        if self.click_fanout < 1 || self.click_fanout > self.vocab / 2 {
            return bad("click_fanout must lie in [1, vocab / 2]");
        }
        Ok(())
    }

    pub fn world(&self) -> Result<SynthWorld> {
        self.validate()?;
        let mut rng = Rng::stream(self.seed, WORLD_STREAM);
        let click_items = (self.vocab / 2) as u32;
        let purchase_items = self.vocab as u32 - click_items;
        let mut high = vec![0u32; self.vocab + 1];
        let mut low = vec![Vec::new(); self.vocab + 1];
        let mut pool: Vec<u32> = (1..=click_items).collect();
        for i in 1..=self.vocab {
            high[i] = click_items + 1 + rng.below(purchase_items as usize) as u32;
            rng.shuffle(&mut pool);
            low[i] = pool[..self.click_fanout].to_vec();
        }
        Ok(SynthWorld {
            high,
            low,
            click_items,
        })
    }
}

/// Deterministic corpus for `config.seed`.
pub fn synth_corpus(config: &SynthConfig) -> Result<Vec<Session>> {
    let world = config.world()?;
    let mut rng = Rng::stream(config.seed, SESSION_STREAM);
    let behavior_of = |item: u32| {
        if world.is_purchase_item(item) {
            Behavior::Purchase
        } else {
            Behavior::Click
        }
    };
    let width = (config.sessions.max(1) - 1).to_string().len();
    let mut out = Vec::with_capacity(config.sessions);
    for s in 0..config.sessions {
        let len = config.min_len + rng.below(config.max_len - config.min_len + 1);
        let mut items = Vec::with_capacity(len);
        let mut current = 1 + rng.below(config.vocab) as u32;
        items.push(current);
        while items.len() < len {
            current = if rng.bernoulli(config.purchase_bias) {
                world.high[current as usize]
            } else {
                let options = &world.low[current as usize];
                options[rng.below(options.len())]
            };
            items.push(current);
        }
        let behaviors = items.iter().map(|&i| behavior_of(i)).collect();
        out.push(Session {
            id: format!("{s:0width$}"),
            items,
            behaviors,
        });
    }
    Ok(out)
}
