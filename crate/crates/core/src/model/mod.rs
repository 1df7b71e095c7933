//! Reward-conditioned recommender: prompt encoding, the mapping block, the
//! classification head and the weighted cross-entropy objective.

mod block;
pub mod checkpoint;
mod train;

pub use block::{attention, mean_pool, mlp_block, self_attentive_block, AttentiveBlock};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use train::{train, CheckpointKind, EpochSummary, NoopObserver, TrainConfig, TrainObserver, TrainOutcome};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{PromptSample, CONTEXT_LEN, PAD};
use crate::encoders::{Encoder, EncoderKind, SequenceEncoder};
use crate::rng::Rng;
use crate::tensor::{Bound, Graph, ParamId, ParamStore, Tensor, TensorError, Var};

/// Rows in the step embedding table; larger steps share the last row.
pub const STEP_TABLE_LEN: usize = 50;

const INIT_STREAM: u64 = 0x1_1417;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("target item 0 is the padding index")]
    PaddingTarget,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockVariant {
    #[default]
    SelfAttention,
    MeanPool,
    Mlp,
}

impl FromStr for BlockVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "self_attention" => Ok(BlockVariant::SelfAttention),
            "mean_pool" => Ok(BlockVariant::MeanPool),
            "mlp" => Ok(BlockVariant::Mlp),
            other => Err(format!("unknown block variant `{other}` (self_attention|mean_pool|mlp)")),
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockVariant::SelfAttention => "self_attention",
            BlockVariant::MeanPool => "mean_pool",
            BlockVariant::Mlp => "mlp",
        })
    }
}

/// Per-sample weight of the cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossWeight {
    /// Immediate reward `r_t`.
    #[default]
    Immediate,
    /// Unweighted cross-entropy.
    None,
    /// Cumulative reward `R_t`.
    Cumulative,
}

impl LossWeight {
    pub fn weight(self, sample: &PromptSample) -> f64 {
        match self {
            LossWeight::Immediate => sample.immediate_reward,
            LossWeight::None => 1.0,
            LossWeight::Cumulative => sample.cumulative_reward,
        }
    }
}

impl FromStr for LossWeight {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "immediate" => Ok(LossWeight::Immediate),
            "none" => Ok(LossWeight::None),
            "cumulative" => Ok(LossWeight::Cumulative),
            other => Err(format!("unknown loss weight `{other}` (immediate|none|cumulative)")),
        }
    }
}

impl fmt::Display for LossWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossWeight::Immediate => "immediate",
            LossWeight::None => "none",
            LossWeight::Cumulative => "cumulative",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of candidate items; item indices run `1..=n_items`.
    pub n_items: usize,
    pub dim: usize,
    pub encoder: EncoderKind,
    pub block: BlockVariant,
    pub layer_norm: bool,
    /// Dropout ratio on the attention branch of the block.
    pub dropout: f64,
    /// When false the block sees only the state `s_t`: plain sequential
    /// recommendation without reward or step conditioning.
    pub use_prompt: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_items: 1,
            dim: 64,
            encoder: EncoderKind::Gru,
            block: BlockVariant::SelfAttention,
            layer_norm: true,
            dropout: 0.1,
            use_prompt: true,
        }
    }
}

impl ModelConfig {
    /// Plain cross-entropy baseline over the same encoder.
    pub fn baseline(self) -> Self {
        Self {
            block: BlockVariant::MeanPool,
            use_prompt: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_items < 1 {
            return Err(ModelError::Config("need at least one item".into()));
        }
        if self.dim < 1 {
            return Err(ModelError::Config("embedding size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.use_prompt && self.block == BlockVariant::Mlp {
            return Err(ModelError::Config("the mlp block needs the full prompt".into()));
        }
        Ok(())
    }
}

/// Inputs for one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PromptBatch {
    pub contexts: Vec<[u32; CONTEXT_LEN]>,
    pub steps: Vec<usize>,
    /// Cumulative reward fed into the prompt.
    pub rewards: Vec<f64>,
}

impl PromptBatch {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a PromptSample>) -> Self {
        let mut b = Self::default();
        for s in samples {
            b.push(s.context, s.step, s.cumulative_reward);
        }
        b
    }

    pub fn push(&mut self, context: [u32; CONTEXT_LEN], step: usize, reward: f64) {
        self.contexts.push(context);
        self.steps.push(step);
        self.rewards.push(reward);
    }

    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(ModelError::Batch("empty batch".into()));
        }
        if self.steps.len() != self.len() || self.rewards.len() != self.len() {
            return Err(ModelError::Batch("contexts, steps and rewards differ in length".into()));
        }
        if self.steps.contains(&0) {
            return Err(ModelError::Batch("steps start at 1".into()));
        }
        if self.contexts.iter().any(|c| c[CONTEXT_LEN - 1] == PAD) {
            return Err(ModelError::Batch("context has no items".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum BlockParams {
    SelfAttention {
        w_q: ParamId,
        w_k: ParamId,
        w_v: ParamId,
        norm: Option<(ParamId, ParamId)>,
    },
    MeanPool,
    Mlp {
        w1: ParamId,
        w2: ParamId,
    },
}

/// Trainable state plus the architecture needed to run it.
#[derive(Debug, Clone)]
pub struct PrlModel {
    config: ModelConfig,
    params: ParamStore,
    encoder: Encoder,
    reward_embedding: Option<ParamId>,
    step_table: Option<ParamId>,
    block: BlockParams,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl PrlModel {
    /// Fresh model with Glorot-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::stream(seed, INIT_STREAM);
        let mut params = ParamStore::new();
        let d = config.dim;
        let encoder = Encoder::build(config.encoder, &mut params, config.n_items, d, &mut rng);
        let (reward_embedding, step_table) = if config.use_prompt {
            (
                Some(params.glorot_vector("prl.reward_embedding", d, &mut rng)),
                Some(params.glorot("prl.step_table", STEP_TABLE_LEN, d, &mut rng)),
            )
        } else {
            (None, None)
        };
        let block = match config.block {
            BlockVariant::SelfAttention => BlockParams::SelfAttention {
                w_q: params.glorot("prl.w_q", d, d, &mut rng),
                w_k: params.glorot("prl.w_k", d, d, &mut rng),
                w_v: params.glorot("prl.w_v", d, d, &mut rng),
                norm: config
                    .layer_norm
                    .then(|| (params.ones("prl.norm_gain", &[d]), params.zeros("prl.norm_bias", &[d]))),
            },
            BlockVariant::MeanPool => BlockParams::MeanPool,
            BlockVariant::Mlp => BlockParams::Mlp {
                w1: params.glorot("prl.mlp_w1", 3 * d, d, &mut rng),
                w2: params.glorot("prl.mlp_w2", d, d, &mut rng),
            },
        };
        let head_weight = params.glorot("prl.head_weight", config.n_items, d, &mut rng);
        let head_bias = params.zeros("prl.head_bias", &[config.n_items]);
        Ok(Self {
            config,
            params,
            encoder,
            reward_embedding,
            step_table,
            block,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn param(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }

    /// Replaces every parameter value; names and shapes must match.
    pub fn load_params(&mut self, values: &ParamStore) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (id, name, value) in values.iter() {
            if self.params.name(id) != name || self.params.get(id).shape() != value.shape() {
                return Err(ModelError::Config(format!(
                    "parameter `{name}` {:?} does not match `{}` {:?}",
                    value.shape(),
                    self.params.name(id),
                    self.params.get(id).shape()
                )));
            }
        }
        for (id, _, value) in values.iter() {
            *self.params.get_mut(id) = value.clone();
        }
        Ok(())
    }

    /// `P_t = stack[e_R, s_t, h_t]` as `[batch, 3, d]`, or `[batch, 1, d]`
    /// holding only `s_t` when the prompt is disabled.
    pub fn prompt_representation(&self, g: &mut Graph, p: &Bound, batch: &PromptBatch) -> Result<Var> {
        batch.validate()?;
        let s = self.encoder.encode(g, p, &batch.contexts)?;
        match (self.reward_embedding, self.step_table) {
            (Some(e_r), Some(h)) => Ok(encode_prompt(g, p[e_r], p[h], s, &batch.rewards, &batch.steps)?),
            _ => Ok(g.stack(&[s], 1)?),
        }
    }

    /// Attentive state `s̃_t`, `[batch, d]`.
    pub fn attentive_state(&self, g: &mut Graph, p: &Bound, prompt: Var, train: bool, rng: &mut Rng) -> Result<Var> {
        Ok(match &self.block {
            BlockParams::SelfAttention { w_q, w_k, w_v, norm } => {
                let block = AttentiveBlock {
                    w_q: p[*w_q],
                    w_k: p[*w_k],
                    w_v: p[*w_v],
                    norm: norm.map(|(gain, bias)| (p[gain], p[bias])),
                    dropout: self.config.dropout,
                };
                let out = self_attentive_block(g, prompt, &block, train, rng)?;
                let rows = g.shape(out)[1];
                // row order is [e_R, s_t, h_t]; without a prompt only s_t exists
                g.select(out, 1, if rows == 3 { 1 } else { 0 })?
            }
            BlockParams::MeanPool => mean_pool(g, prompt)?,
            BlockParams::Mlp { w1, w2 } => mlp_block(g, prompt, p[*w1], p[*w2])?,
        })
    }

    /// Candidate logits `[batch, n_items]`; column `i - 1` scores item `i`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &PromptBatch, train: bool, rng: &mut Rng) -> Result<Var> {
        let prompt = self.prompt_representation(g, p, batch)?;
        let state = self.attentive_state(g, p, prompt, train, rng)?;
        Ok(compute_logits(g, state, p[self.head_weight], p[self.head_bias])?)
    }

    /// Mean weighted cross-entropy of a batch.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &PromptBatch,
        targets: &[u32],
        weights: &[f64],
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let logits = self.forward(g, p, batch, train, rng)?;
        weighted_ce_loss(g, logits, targets, weights)
    }

    /// Inference-mode logits, flattened row-major `[batch, n_items]`.
    pub fn score(&self, batch: &PromptBatch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g)?;
        // dropout is inactive outside training, so the stream is never drawn
        let mut rng = Rng::new(0);
        let logits = self.forward(&mut g, &p, batch, false, &mut rng)?;
        Ok(g.value(logits).data().to_vec())
    }
}

/// `e_R = R · e_r`, `h_t = H[min(t, 50) - 1]`, stacked with `s` along axis 1.
pub fn encode_prompt(
    g: &mut Graph,
    reward_embedding: Var,
    step_table: Var,
    states: Var,
    rewards: &[f64],
    steps: &[usize],
) -> std::result::Result<Var, TensorError> {
    let batch = rewards.len();
    if steps.contains(&0) {
        return Err(TensorError::IndexOutOfRange {
            op: "encode_prompt",
            index: 0,
            extent: STEP_TABLE_LEN,
        });
    }
    let r = g.constant(Tensor::new(vec![batch, 1], rewards.to_vec())?)?;
    let e_r = g.mul(r, reward_embedding)?;
    let rows: Vec<usize> = steps.iter().map(|&t| t.min(STEP_TABLE_LEN) - 1).collect();
    let h = g.embedding(step_table, &rows, &[batch])?;
    g.stack(&[e_r, states, h], 1)
}

/// `s̃ W_iᵀ + b` with identity output activation.
pub fn compute_logits(g: &mut Graph, state: Var, weight: Var, bias: Var) -> std::result::Result<Var, TensorError> {
    let y = g.matmul_bt(state, weight)?;
    g.add(y, bias)
}

/// `-mean_b(w_b · log softmax(y_b)[target_b - 1])`.
pub fn weighted_ce_loss(g: &mut Graph, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
    if targets.contains(&PAD) {
        return Err(ModelError::PaddingTarget);
    }
    if weights.len() != targets.len() {
        return Err(ModelError::Batch("one weight per target required".into()));
    }
    let log_p = g.log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize - 1).collect();
    let picked = g.pick(log_p, &idx)?;
    let w = g.constant(Tensor::new(vec![weights.len()], weights.to_vec())?)?;
    let weighted = g.mul(picked, w)?;
    let mean = g.mean(weighted)?;
    Ok(g.scale(mean, -1.0)?)
}
