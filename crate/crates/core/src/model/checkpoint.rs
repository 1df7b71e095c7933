//! Binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! b"PRLCKPT1"              8-byte magic
//! u64 little-endian        header length in bytes
//! header                   UTF-8 JSON (see `Header`)
//! payload                  little-endian f64 values of every array
//! ```
//!
//! The header echoes the model config, the seed, an opaque run-config object,
//! the optimizer settings, and lists each array as `(name, shape, offset)`
//! with `offset` in bytes from the start of the payload. Parameters come
//! first in registration order, then Adam moments as `adam.m.<name>` and
//! `adam.v.<name>`, then the optional `step_rewards` table as `[k, 2]` rows
//! of `(step, mean cumulative reward)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelConfig, ModelError, PrlModel};
use crate::data::StepRewardAverages;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"PRLCKPT1";
const STEP_REWARDS: &str = "step_rewards";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    seed: u64,
    config: serde_json::Value,
    optimizer: Option<OptimizerHeader>,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: PrlModel,
    pub seed: u64,
    /// Free-form run configuration kept for provenance.
    pub config: serde_json::Value,
    pub optimizer: Option<Adam>,
    pub step_rewards: Option<StepRewardAverages>,
}

impl Checkpoint {
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let params = self.model.params();
        let mut blocks: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (_, name, t) in params.iter() {
            blocks.push((name.to_owned(), t.shape(), t.data()));
        }
        if let Some(adam) = &self.optimizer {
            for (id, name, t) in params.iter() {
                blocks.push((format!("adam.m.{name}"), t.shape(), adam.first_moment(id)));
            }
            for (id, name, t) in params.iter() {
                blocks.push((format!("adam.v.{name}"), t.shape(), adam.second_moment(id)));
            }
        }
        let table: Vec<f64> = self
            .step_rewards
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|(step, v)| [step as f64, v])
            .collect();
        let table_shape = [table.len() / 2, 2];
        if self.step_rewards.is_some() {
            blocks.push((STEP_REWARDS.to_owned(), &table_shape, &table));
        }
        let mut offset = 0u64;
        let arrays = blocks
            .iter()
            .map(|(name, shape, data)| {
                let e = ArrayEntry {
                    name: name.clone(),
                    shape: shape.to_vec(),
                    offset,
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            model: *self.model.config(),
            seed: self.seed,
            config: self.config.clone(),
            optimizer: self.optimizer.as_ref().map(|a| OptimizerHeader {
                config: a.config,
                step: a.step_count(),
            }),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, _, data) in &blocks {
            for v in data.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 32 {
            return Err(CheckpointError::Malformed(format!("header length {len}")));
        }
        let mut json = vec![0u8; len as usize];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut payload = Vec::new();
        input.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(CheckpointError::Malformed("payload is not a whole number of f64 values".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut arrays = std::collections::HashMap::new();
        for e in &header.arrays {
            let numel: usize = e.shape.iter().product();
            if e.offset % 8 != 0 {
                return Err(CheckpointError::Malformed(format!("misaligned array `{}`", e.name)));
            }
            let start = (e.offset / 8) as usize;
            let data = values
                .get(start..start + numel)
                .ok_or_else(|| CheckpointError::Malformed(format!("array `{}` exceeds payload", e.name)))?;
            let t = Tensor::new(e.shape.clone(), data.to_vec())
                .map_err(|err| CheckpointError::Malformed(format!("array `{}`: {err}", e.name)))?;
            if arrays.insert(e.name.clone(), t).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate array `{}`", e.name)));
            }
        }
        let mut take = |name: &str| {
            arrays
                .remove(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("missing array `{name}`")))
        };

        let mut model = PrlModel::new(header.model, header.seed)?;
        let mut store = ParamStore::new();
        let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_owned()).collect();
        for name in &names {
            store.register(name, take(name)?);
        }
        model.load_params(&store)?;
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut first = Vec::new();
                let mut second = Vec::new();
                for name in &names {
                    first.push(take(&format!("adam.m.{name}"))?.into_data());
                }
                for name in &names {
                    second.push(take(&format!("adam.v.{name}"))?.into_data());
                }
                Some(Adam::from_parts(o.config, o.step, first, second))
            }
            None => None,
        };
        let step_rewards = match arrays.remove(STEP_REWARDS) {
            Some(t) => {
                if t.shape().len() != 2 || t.shape()[1] != 2 {
                    return Err(CheckpointError::Malformed("step_rewards must be [k, 2]".into()));
                }
                let rows = t.data().chunks(2).map(|r| (r[0] as usize, r[1]));
                Some(
                    StepRewardAverages::from_table(rows)
                        .map_err(|e| CheckpointError::Malformed(e.to_string()))?,
                )
            }
            None => None,
        };
        if let Some(extra) = arrays.keys().next() {
            return Err(CheckpointError::Malformed(format!("unexpected array `{extra}`")));
        }
        Ok(Self {
            model,
            seed: header.seed,
            config: header.config,
            optimizer,
            step_rewards,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}
