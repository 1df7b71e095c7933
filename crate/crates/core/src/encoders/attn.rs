use super::{embed_contexts, SequenceEncoder};
use crate::data::{CONTEXT_LEN, PAD};
use crate::model::attention;
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Added to attention scores of keys a query may not see.
const MASKED: f64 = -1e9;

/// Single-head, single-block causal self-attention encoder.
///
/// Item and learned positional embeddings are summed, passed through causal
/// attention with padded keys masked out, a residual connection, and a
/// position-wise `relu` feed-forward pair of width `d` with its own residual.
/// The state is the output at the last position, which always holds the most
/// recent real item.
#[derive(Debug, Clone)]
pub struct AttnEncoder {
    dim: usize,
    items: ParamId,
    positions: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

impl AttnEncoder {
    pub fn new(store: &mut ParamStore, n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            dim,
            items: store.glorot("encoder.item_embedding", n_items + 1, dim, rng),
            positions: store.glorot("encoder.positions", CONTEXT_LEN, dim, rng),
            w_q: store.glorot("encoder.w_q", dim, dim, rng),
            w_k: store.glorot("encoder.w_k", dim, dim, rng),
            w_v: store.glorot("encoder.w_v", dim, dim, rng),
            ff_w1: store.glorot("encoder.ff_w1", dim, dim, rng),
            ff_b1: store.zeros("encoder.ff_b1", &[dim]),
            ff_w2: store.glorot("encoder.ff_w2", dim, dim, rng),
            ff_b2: store.zeros("encoder.ff_b2", &[dim]),
        }
    }

    /// Outputs at every position, `[batch, CONTEXT_LEN, d]`.
    pub fn encode_all(&self, g: &mut Graph, p: &Bound, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var> {
        if contexts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "attn_encode",
                shape: vec![0, CONTEXT_LEN],
                reason: "empty batch",
            });
        }
        let emb = embed_contexts(g, p[self.items], contexts)?;
        let x = g.add(emb, p[self.positions])?;
        let q = g.matmul(x, p[self.w_q])?;
        let k = g.matmul(x, p[self.w_k])?;
        let v = g.matmul(x, p[self.w_v])?;
        let mask = g.constant(attention_mask(contexts))?;
        let att = attention(g, q, k, v, Some(mask))?;
        let a = g.add(x, att)?;
        let h = g.matmul(a, p[self.ff_w1])?;
        let h = g.add(h, p[self.ff_b1])?;
        let h = g.relu(h)?;
        let h = g.matmul(h, p[self.ff_w2])?;
        let h = g.add(h, p[self.ff_b2])?;
        g.add(a, h)
    }
}

/// `[batch, L, L]` additive mask: query `i` sees key `j` iff `j <= i` and
/// position `j` holds a real item.
fn attention_mask(contexts: &[[u32; CONTEXT_LEN]]) -> Tensor {
    let mut data = Vec::with_capacity(contexts.len() * CONTEXT_LEN * CONTEXT_LEN);
    for c in contexts {
        for i in 0..CONTEXT_LEN {
            for (j, &item) in c.iter().enumerate() {
                data.push(if j <= i && item != PAD { 0.0 } else { MASKED });
            }
        }
    }
    Tensor::new(vec![contexts.len(), CONTEXT_LEN, CONTEXT_LEN], data).expect("non-empty batch")
}

impl SequenceEncoder for AttnEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn item_table(&self) -> ParamId {
        self.items
    }

    fn encode(&self, g: &mut Graph, p: &Bound, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var> {
        let all = self.encode_all(g, p, contexts)?;
        g.select(all, 1, CONTEXT_LEN - 1)
    }
}
