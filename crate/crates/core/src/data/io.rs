//! Text formats for sessions, prompts, item maps and step-reward tables.
//!
//! * sessions: one line per session, `id<TAB>i1,i2,..<TAB>b1,b2,..` with
//!   behaviors spelled `click`/`purchase`.
//! * item map: `index<TAB>raw_id`.
//! * prompts: CSV `cumulative_reward,context,step,action,immediate_reward,behavior`
//!   where `context` is ten space-separated item indices.
//! * step rewards: CSV `step,mean_cumulative_reward`.
//!
//! Lines starting with `#` are provenance comments and are skipped on read.
//! Floats are written in shortest round-trip form.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{Behavior, DataError, PromptSample, Result, Session, StepRewardAverages, CONTEXT_LEN};

/// Config hash and seed stamped onto every emitted artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn comment(&self) -> String {
        format!("# prl config_hash={} seed={}", self.config_hash, self.seed)
    }
}

fn header(out: &mut impl Write, prov: Option<&Provenance>) -> std::io::Result<()> {
    if let Some(p) = prov {
        writeln!(out, "{}", p.comment())?;
    }
    Ok(())
}

fn parse_err(path: &str, line: usize, reason: impl Into<String>) -> DataError {
    DataError::Parse {
        path: path.to_owned(),
        line,
        reason: reason.into(),
    }
}

fn join<T: ToString>(values: &[T], sep: &str) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Non-comment, non-empty lines with their 1-based line numbers.
fn data_lines(reader: impl BufRead) -> impl Iterator<Item = std::io::Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)))
        .filter(|r| match r {
            Ok((_, l)) => !(l.trim().is_empty() || l.starts_with('#')),
            Err(_) => true,
        })
}

pub fn write_sessions(out: &mut impl Write, sessions: &[Session], prov: Option<&Provenance>) -> std::io::Result<()> {
    header(out, prov)?;
    for s in sessions {
        let behaviors: Vec<&str> = s.behaviors.iter().map(|b| b.as_str()).collect();
        writeln!(out, "{}\t{}\t{}", s.id, join(&s.items, ","), behaviors.join(","))?;
    }
    Ok(())
}

pub fn read_sessions(reader: impl BufRead, path: &str) -> Result<Vec<Session>> {
    let mut out = Vec::new();
    for line in data_lines(reader) {
        let (no, line) = line?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, no, format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let items = fields[1]
            .split(',')
            .map(|v| v.trim().parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, no, format!("bad item index: {e}")))?;
        let behaviors = fields[2]
            .split(',')
            .map(|v| v.trim().parse::<Behavior>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, no, e))?;
        let session = Session::new(fields[0], items, behaviors).map_err(|e| parse_err(path, no, e.to_string()))?;
        out.push(session);
    }
    Ok(out)
}

pub fn write_item_map(out: &mut impl Write, item_map: &[String], prov: Option<&Provenance>) -> std::io::Result<()> {
    header(out, prov)?;
    for (i, raw) in item_map.iter().enumerate() {
        writeln!(out, "{}\t{}", i + 1, raw)?;
    }
    Ok(())
}

pub fn read_item_map(reader: impl BufRead, path: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for line in data_lines(reader) {
        let (no, line) = line?;
        let (idx, raw) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, no, "expected `index<TAB>raw_id`"))?;
        let idx: usize = idx.parse().map_err(|_| parse_err(path, no, "bad index"))?;
        if idx != out.len() + 1 {
            return Err(parse_err(path, no, format!("expected index {}, got {idx}", out.len() + 1)));
        }
        out.push(raw.to_owned());
    }
    Ok(out)
}

pub const PROMPT_HEADER: &str = "cumulative_reward,context,step,action,immediate_reward,behavior";

pub fn write_prompts(out: &mut impl Write, prompts: &[PromptSample], prov: Option<&Provenance>) -> std::io::Result<()> {
    header(out, prov)?;
    writeln!(out, "{PROMPT_HEADER}")?;
    for p in prompts {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.cumulative_reward,
            join(&p.context, " "),
            p.step,
            p.action,
            p.immediate_reward,
            p.behavior
        )?;
    }
    Ok(())
}

pub fn read_prompts(reader: impl BufRead, path: &str) -> Result<Vec<PromptSample>> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for line in data_lines(reader) {
        let (no, line) = line?;
        if !seen_header {
            if line != PROMPT_HEADER {
                return Err(parse_err(path, no, "missing prompt header"));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(parse_err(path, no, "expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(path, no, format!("bad number `{s}`")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(path, no, format!("bad integer `{s}`")));
        let ctx: Vec<u32> = f[1]
            .split(' ')
            .map(|v| v.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err(path, no, "bad context"))?;
        let context: [u32; CONTEXT_LEN] = ctx
            .try_into()
            .map_err(|_| parse_err(path, no, format!("context must hold {CONTEXT_LEN} entries")))?;
        let action = int(f[3])? as u32;
        if action == 0 {
            return Err(parse_err(path, no, "action cannot be the padding index"));
        }
        out.push(PromptSample {
            cumulative_reward: num(f[0])?,
            context,
            step: int(f[2])?,
            action,
            immediate_reward: num(f[4])?,
            behavior: f[5].parse().map_err(|e: String| parse_err(path, no, e))?,
        });
    }
    Ok(out)
}

pub const STEP_REWARD_HEADER: &str = "step,mean_cumulative_reward";

pub fn write_step_rewards(
    out: &mut impl Write,
    averages: &StepRewardAverages,
    prov: Option<&Provenance>,
) -> std::io::Result<()> {
    header(out, prov)?;
    writeln!(out, "{STEP_REWARD_HEADER}")?;
    for (step, v) in averages.iter() {
        writeln!(out, "{step},{v}")?;
    }
    Ok(())
}

pub fn read_step_rewards(reader: impl BufRead, path: &str) -> Result<StepRewardAverages> {
    let mut rows = Vec::new();
    let mut seen_header = false;
    for line in data_lines(reader) {
        let (no, line) = line?;
        if !seen_header {
            seen_header = true;
            if line == STEP_REWARD_HEADER {
                continue;
            }
        }
        let (s, v) = line.split_once(',').ok_or_else(|| parse_err(path, no, "expected `step,value`"))?;
        let step = s.parse::<usize>().map_err(|_| parse_err(path, no, "bad step"))?;
        let value = v.parse::<f64>().map_err(|_| parse_err(path, no, "bad value"))?;
        rows.push((step, value));
    }
    StepRewardAverages::from_table(rows)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn load_sessions(path: &Path) -> Result<Vec<Session>> {
    read_sessions(open(path)?, &path.display().to_string())
}

pub fn load_prompts(path: &Path) -> Result<Vec<PromptSample>> {
    read_prompts(open(path)?, &path.display().to_string())
}

pub fn load_item_map(path: &Path) -> Result<Vec<String>> {
    read_item_map(open(path)?, &path.display().to_string())
}

pub fn load_step_rewards(path: &Path) -> Result<StepRewardAverages> {
    read_step_rewards(open(path)?, &path.display().to_string())
}

/// Writes through a buffered file handle.
pub fn save(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()
}
