use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, EvalReport, InferenceRewardConfig, Result};
use crate::data::io::Provenance;
use crate::data::{Behavior, RewardConfig, Session, StepRewardAverages};
use crate::model::PrlModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Mu,
    Epsilon,
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mu" => Ok(SweepParam::Mu),
            "epsilon" => Ok(SweepParam::Epsilon),
            other => Err(format!("unknown sweep parameter `{other}` (mu|epsilon)")),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::Mu => "mu",
            SweepParam::Epsilon => "epsilon",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub parameter: f64,
    pub report: EvalReport,
}

/// One evaluation per grid value. Every point reuses the seed of `base`, so
/// points differ only in the swept parameter.
pub fn sweep(
    model: &PrlModel,
    sessions: &[Session],
    averages: &StepRewardAverages,
    rewards: &RewardConfig,
    base: &InferenceRewardConfig,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(EvalError::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|&value| {
            let cfg = match param {
                SweepParam::Mu => InferenceRewardConfig { mu: value, ..*base },
                SweepParam::Epsilon => InferenceRewardConfig { epsilon: value, ..*base },
            };
            let report = evaluate(model, sessions, averages, rewards, &cfg, &[5])?;
            Ok(SweepRow {
                parameter: value,
                report,
            })
        })
        .collect()
}

pub const SWEEP_HEADER: &str = "parameter,cumulative_reward_at_1,hr5_purchase,ng5_purchase,hr5_click,ng5_click";

pub fn write_sweep_csv(out: &mut impl Write, rows: &[SweepRow], prov: Option<&Provenance>) -> std::io::Result<()> {
    if let Some(p) = prov {
        writeln!(out, "{}", p.comment())?;
    }
    writeln!(out, "{SWEEP_HEADER}")?;
    for row in rows {
        let r = &row.report;
        let (hp, np) = r.at(Behavior::Purchase, 5).unwrap_or((f64::NAN, f64::NAN));
        let (hc, nc) = r.at(Behavior::Click, 5).unwrap_or((f64::NAN, f64::NAN));
        writeln!(
            out,
            "{},{},{hp},{np},{hc},{nc}",
            row.parameter, r.cumulative_reward_at_1
        )?;
    }
    Ok(())
}
