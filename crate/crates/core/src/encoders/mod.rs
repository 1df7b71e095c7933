//! Sequence encoders mapping a padded context to a state vector.

mod attn;
mod gru;

pub use attn::AttnEncoder;
pub use gru::GruEncoder;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{CONTEXT_LEN, PAD};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Gru,
    Attn,
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "attn" => Ok(EncoderKind::Attn),
            other => Err(format!("unknown encoder `{other}` (gru|attn)")),
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Gru => "gru",
            EncoderKind::Attn => "attn",
        })
    }
}

/// `s_t = G(x_{1:t})` over a batch of left-padded contexts.
pub trait SequenceEncoder {
    fn dim(&self) -> usize;

    /// Item embedding table `[n + 1, d]`; row 0 is the padding row.
    fn item_table(&self) -> ParamId;

    /// Returns states `[batch, d]`.
    fn encode(&self, graph: &mut Graph, params: &Bound, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var>;
}

/// Encoder selected at run time.
#[derive(Debug, Clone)]
pub enum Encoder {
    Gru(GruEncoder),
    Attn(AttnEncoder),
}

impl Encoder {
    pub fn build(kind: EncoderKind, store: &mut ParamStore, n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        match kind {
            EncoderKind::Gru => Encoder::Gru(GruEncoder::new(store, n_items, dim, rng)),
            EncoderKind::Attn => Encoder::Attn(AttnEncoder::new(store, n_items, dim, rng)),
        }
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Gru(_) => EncoderKind::Gru,
            Encoder::Attn(_) => EncoderKind::Attn,
        }
    }
}

impl SequenceEncoder for Encoder {
    fn dim(&self) -> usize {
        match self {
            Encoder::Gru(e) => e.dim(),
            Encoder::Attn(e) => e.dim(),
        }
    }

    fn item_table(&self) -> ParamId {
        match self {
            Encoder::Gru(e) => e.item_table(),
            Encoder::Attn(e) => e.item_table(),
        }
    }

    fn encode(&self, graph: &mut Graph, params: &Bound, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var> {
        match self {
            Encoder::Gru(e) => e.encode(graph, params, contexts),
            Encoder::Attn(e) => e.encode(graph, params, contexts),
        }
    }
}

/// Looks up `[batch, CONTEXT_LEN, d]` item embeddings.
fn embed_contexts(graph: &mut Graph, table: Var, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var> {
    let indices: Vec<usize> = contexts.iter().flatten().map(|&i| i as usize).collect();
    graph.embedding(table, &indices, &[contexts.len(), CONTEXT_LEN])
}

/// 1.0 at real positions and 0.0 at padding, shaped `[batch, 1]` for step `j`.
fn position_mask(contexts: &[[u32; CONTEXT_LEN]], j: usize) -> Tensor {
    let data = contexts.iter().map(|c| if c[j] == PAD { 0.0 } else { 1.0 }).collect();
    Tensor::new(vec![contexts.len(), 1], data).expect("non-empty batch")
}
