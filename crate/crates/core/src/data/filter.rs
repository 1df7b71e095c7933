use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{DataError, DatasetSplit, Result, Session};
use crate::rng::Rng;

const SPLIT_STREAM: u64 = 0x5EED_5B17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub min_len: usize,
    pub max_len: usize,
    /// When set, items seen fewer times across the corpus are deleted from
    /// sessions before the length bounds are applied.
    pub min_item_count: Option<usize>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_len: 3,
            max_len: 50,
            min_item_count: None,
        }
    }
}

pub fn filter_sessions(sessions: Vec<Session>, config: &FilterConfig) -> Result<Vec<Session>> {
    let mut sessions = sessions;
    if let Some(min_count) = config.min_item_count {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for s in &sessions {
            for &i in &s.items {
                *counts.entry(i).or_default() += 1;
            }
        }
        for s in &mut sessions {
            let keep: Vec<bool> = s.items.iter().map(|i| counts[i] >= min_count).collect();
            let mut k = keep.iter();
            s.items.retain(|_| *k.next().unwrap());
            let mut k = keep.iter();
            s.behaviors.retain(|_| *k.next().unwrap());
        }
    }
    let kept: Vec<Session> = sessions
        .into_iter()
        .filter(|s| (config.min_len..=config.max_len).contains(&s.len()))
        .collect();
    if kept.is_empty() {
        return Err(DataError::AllFiltered);
    }
    Ok(kept)
}

/// Renumbers the items still present densely from 1 (in order of first
/// appearance) and returns the matching raw-id table.
pub fn compact_items(sessions: &mut [Session], item_map: &[String]) -> Vec<String> {
    let mut remap: HashMap<u32, u32> = HashMap::new();
    let mut out = Vec::new();
    for s in sessions.iter_mut() {
        for item in &mut s.items {
            let next = out.len() as u32 + 1;
            let new = *remap.entry(*item).or_insert_with(|| {
                out.push(item_map[*item as usize - 1].clone());
                next
            });
            *item = new;
        }
    }
    out
}

/// Seeded 8:1:1 train/validation/test partition.
pub fn split_dataset(sessions: Vec<Session>, seed: u64) -> Result<DatasetSplit> {
    let n = sessions.len();
    if n < 10 {
        return Err(DataError::TooFewSessions { needed: 10, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::stream(seed, SPLIT_STREAM).shuffle(&mut order);
    let n_holdout = (n as f64 / 10.0).round() as usize;
    let n_train = n - 2 * n_holdout;

    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    let mut slot = vec![0u8; n];
    for (rank, &i) in order.iter().enumerate() {
        slot[i] = if rank < n_train {
            0
        } else if rank < n_train + n_holdout {
            1
        } else {
            2
        };
    }
    for (i, s) in sessions.into_iter().enumerate() {
        parts[slot[i] as usize].push(s);
    }
    let [train, validation, test] = parts;
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}
