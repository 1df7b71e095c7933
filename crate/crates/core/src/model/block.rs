use crate::rng::Rng;
use crate::tensor::{Graph, Result, TensorError, Var};

/// `softmax(Q Kᵀ / √d + mask) V` over `[batch, rows, d]` stacks, where `d`
/// is the key width. `mask` is added to the scores before the softmax.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let d = *g.shape(k).last().ok_or(TensorError::InvalidShape {
        op: "attention",
        shape: vec![],
        reason: "keys need a feature axis",
    })?;
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let weights = g.softmax(scores)?;
    g.matmul(weights, v)
}

/// Weights of the residual self-attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttentiveBlock {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    /// Layer-norm gain and bias applied after the residual sum.
    pub norm: Option<(Var, Var)>,
    pub dropout: f64,
}

/// `P̃ = P + dropout(Attention(P W_q, P W_k, P W_v))`, optionally layer
/// normalized. Input and output are `[batch, rows, d]`.
pub fn self_attentive_block(g: &mut Graph, prompt: Var, block: &AttentiveBlock, train: bool, rng: &mut Rng) -> Result<Var> {
    let q = g.matmul(prompt, block.w_q)?;
    let k = g.matmul(prompt, block.w_k)?;
    let v = g.matmul(prompt, block.w_v)?;
    let att = attention(g, q, k, v, None)?;
    let att = g.dropout(att, block.dropout, train, rng)?;
    let out = g.add(prompt, att)?;
    match block.norm {
        Some((gain, bias)) => g.layer_norm(out, gain, bias),
        None => Ok(out),
    }
}

/// Mean of the prompt rows, `[batch, d]`.
pub fn mean_pool(g: &mut Graph, prompt: Var) -> Result<Var> {
    g.mean_axis(prompt, 1)
}

/// `tanh(tanh(flatten(P) W1) W2)` with `W1: [3d, d]` and `W2: [d, d]`.
pub fn mlp_block(g: &mut Graph, prompt: Var, w1: Var, w2: Var) -> Result<Var> {
    let shape = g.shape(prompt).to_vec();
    let flat = g.reshape(prompt, &[shape[0], shape[1] * shape[2]])?;
    let h = g.matmul(flat, w1)?;
    let h = g.tanh(h)?;
    let h = g.matmul(h, w2)?;
    g.tanh(h)
}
