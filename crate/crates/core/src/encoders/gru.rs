use super::{embed_contexts, position_mask, SequenceEncoder};
use crate::data::{CONTEXT_LEN, PAD};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Result, TensorError, Var};

/// Gated recurrent encoder without biases:
///
/// ```text
/// z = σ(x W_z + s U_z)
/// g = σ(x W_g + s U_g)
/// ŝ = tanh(x W_s + (g ⊙ s) U_s)
/// s' = (1 - z) ⊙ s + z ⊙ ŝ
/// ```
///
/// States are row vectors, so each `[d, d]` matrix multiplies from the right.
/// The recurrence starts from a zero state at the first real item; padded
/// positions leave the state untouched.
#[derive(Debug, Clone)]
pub struct GruEncoder {
    dim: usize,
    items: ParamId,
    w_z: ParamId,
    u_z: ParamId,
    w_s: ParamId,
    u_s: ParamId,
    w_g: ParamId,
    u_g: ParamId,
}

impl GruEncoder {
    pub fn new(store: &mut ParamStore, n_items: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            dim,
            items: store.glorot("encoder.item_embedding", n_items + 1, dim, rng),
            w_z: store.glorot("encoder.w_z", dim, dim, rng),
            u_z: store.glorot("encoder.u_z", dim, dim, rng),
            w_s: store.glorot("encoder.w_s", dim, dim, rng),
            u_s: store.glorot("encoder.u_s", dim, dim, rng),
            w_g: store.glorot("encoder.w_g", dim, dim, rng),
            u_g: store.glorot("encoder.u_g", dim, dim, rng),
        }
    }

    pub fn weights(&self) -> [ParamId; 6] {
        [self.w_z, self.u_z, self.w_s, self.u_s, self.w_g, self.u_g]
    }
}

impl SequenceEncoder for GruEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn item_table(&self) -> ParamId {
        self.items
    }

    fn encode(&self, g: &mut Graph, p: &Bound, contexts: &[[u32; CONTEXT_LEN]]) -> Result<Var> {
        if contexts.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gru_encode",
                shape: vec![0, CONTEXT_LEN],
                reason: "empty batch",
            });
        }
        let batch = contexts.len();
        let emb = embed_contexts(g, p[self.items], contexts)?;
        let mut s = g.constant(crate::tensor::Tensor::zeros(&[batch, self.dim]))?;
        // positions where every context is still padding cannot move the state
        let first = (0..CONTEXT_LEN)
            .find(|&j| contexts.iter().any(|c| c[j] != PAD))
            .unwrap_or(CONTEXT_LEN);
        for j in first..CONTEXT_LEN {
            let x = g.select(emb, 1, j)?;
            let z = gate(g, x, s, p[self.w_z], p[self.u_z])?;
            let r = gate(g, x, s, p[self.w_g], p[self.u_g])?;
            let xs = g.matmul(x, p[self.w_s])?;
            let rs = g.mul(r, s)?;
            let rs = g.matmul(rs, p[self.u_s])?;
            let pre = g.add(xs, rs)?;
            let cand = g.tanh(pre)?;
            let delta = g.sub(cand, s)?;
            let step = g.mul(z, delta)?;
            let step = if contexts.iter().all(|c| c[j] != PAD) {
                step
            } else {
                let m = g.constant(position_mask(contexts, j))?;
                g.mul(step, m)?
            };
            s = g.add(s, step)?;
        }
        Ok(s)
    }
}

fn gate(g: &mut Graph, x: Var, s: Var, w: Var, u: Var) -> Result<Var> {
    let a = g.matmul(x, w)?;
    let b = g.matmul(s, u)?;
    let pre = g.add(a, b)?;
    g.sigmoid(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn build(n: usize, d: usize, seed: u64) -> (ParamStore, GruEncoder) {
        let mut store = ParamStore::new();
        let enc = GruEncoder::new(&mut store, n, d, &mut Rng::new(seed));
        (store, enc)
    }

    fn run(store: &ParamStore, enc: &GruEncoder, ctx: &[[u32; CONTEXT_LEN]]) -> Vec<f64> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g).unwrap();
        let s = enc.encode(&mut g, &p, ctx).unwrap();
        g.value(s).data().to_vec()
    }

    #[test]
    fn zero_weights_zero_state() {
        let (mut store, enc) = build(5, 4, 1);
        for id in enc.weights() {
            *store.get_mut(id) = Tensor::zeros(&[4, 4]);
        }
        let s = run(&store, &enc, &[[0, 0, 0, 0, 0, 0, 1, 2, 3, 4], [5; CONTEXT_LEN]]);
        assert_eq!(s, vec![0.0; 8]);
    }

    #[test]
    fn output_shape_and_batch_independence() {
        let (store, enc) = build(6, 3, 2);
        let a = [0, 0, 0, 0, 0, 0, 0, 0, 2, 4];
        let b = [1, 2, 3, 4, 5, 6, 1, 2, 3, 4];
        let both = run(&store, &enc, &[a, b]);
        assert_eq!(both.len(), 6);
        assert_eq!(run(&store, &enc, &[a]), both[..3].to_vec());
        assert_eq!(run(&store, &enc, &[b]), both[3..].to_vec());
    }

    #[test]
    fn padding_row_is_inert() {
        let (mut store, enc) = build(6, 3, 3);
        let ctx = [[0, 0, 0, 0, 0, 0, 0, 1, 5, 2], [3; CONTEXT_LEN]];
        let before = run(&store, &enc, &ctx);
        let table = store.get_mut(enc.item_table());
        table.data_mut()[..3].copy_from_slice(&[9.0, -7.0, 3.5]);
        assert_eq!(run(&store, &enc, &ctx), before);
    }

    #[test]
    fn out_of_range_item_rejected() {
        let (store, enc) = build(4, 2, 4);
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g).unwrap();
        let err = enc.encode(&mut g, &p, &[[0, 0, 0, 0, 0, 0, 0, 0, 0, 5]]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { op: "embedding", .. }));
    }
}
