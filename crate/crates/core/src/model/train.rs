use serde::{Deserialize, Serialize};

use super::{LossWeight, ModelError, PrlModel, PromptBatch, Result};
use crate::data::PromptSample;
use crate::rng::Rng;
use crate::tensor::{Adam, Graph, TensorError};

const SHUFFLE_STREAM: u64 = 0x5_4FF1E;
const DROPOUT_STREAM: u64 = 0xD_0907;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stops after this many optimizer updates, even mid-epoch.
    pub max_steps: Option<usize>,
    pub loss_weight: LossWeight,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 0.01,
            epochs: 10,
            max_steps: None,
            loss_weight: LossWeight::Immediate,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(ModelError::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.epochs < 1 {
            return Err(ModelError::Config("need at least one epoch".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    /// 1-based.
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    EpochEnd(usize),
    Best(usize),
}

/// Hooks called by [`train`] at epoch boundaries.
pub trait TrainObserver {
    /// Validation score of the current model; higher is better.
    fn validate(&mut self, _model: &PrlModel) -> Result<Option<f64>> {
        Ok(None)
    }

    fn checkpoint(&mut self, _kind: CheckpointKind, _model: &PrlModel, _optimizer: &Adam) -> Result<()> {
        Ok(())
    }

    fn epoch_end(&mut self, _summary: &EpochSummary) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Loss of every optimizer update, in order.
    pub loss_trace: Vec<f64>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch and score of the best validation point.
    pub best: Option<(usize, f64)>,
    /// Set when a non-finite value stopped training. The model then holds the
    /// parameters from before the failing update.
    pub halted: Option<String>,
}

impl TrainOutcome {
    pub fn steps(&self) -> usize {
        self.loss_trace.len()
    }
}

/// Seeded mini-batch training with Adam.
///
/// Each epoch visits the prompts in a fresh shuffled order. After each epoch
/// the observer validates the model, an epoch-end checkpoint is offered, and
/// a best checkpoint is offered whenever validation improves.
pub fn train(
    model: &mut PrlModel,
    optimizer: &mut Adam,
    prompts: &[PromptSample],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(ModelError::Batch("no training prompts".into()));
    }
    let mut shuffle_rng = Rng::stream(config.seed, SHUFFLE_STREAM);
    let mut dropout_rng = Rng::stream(config.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..prompts.len()).collect();
    let mut outcome = TrainOutcome {
        loss_trace: Vec::new(),
        epochs: Vec::new(),
        best: None,
        halted: None,
    };
    let mut graph = Graph::new();
    let budget = config.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=config.epochs {
        shuffle_rng.shuffle(&mut order);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if outcome.loss_trace.len() >= budget {
                break;
            }
            let samples: Vec<&PromptSample> = chunk.iter().map(|&i| &prompts[i]).collect();
            match train_step(model, optimizer, &mut graph, &samples, config.loss_weight, &mut dropout_rng) {
                Ok(loss) => {
                    outcome.loss_trace.push(loss);
                    total += loss;
                    steps += 1;
                }
                Err(ModelError::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGradient(_)))) => {
                    outcome.halted = Some(format!(
                        "epoch {epoch}, update {}: {e}",
                        outcome.loss_trace.len() + 1
                    ));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        if steps == 0 {
            break;
        }
        let validation = observer.validate(model)?;
        let summary = EpochSummary {
            epoch,
            steps,
            mean_loss: total / steps as f64,
            validation,
        };
        observer.epoch_end(&summary);
        observer.checkpoint(CheckpointKind::EpochEnd(epoch), model, optimizer)?;
        if let Some(v) = validation {
            if outcome.best.is_none_or(|(_, b)| v > b) {
                outcome.best = Some((epoch, v));
                observer.checkpoint(CheckpointKind::Best(epoch), model, optimizer)?;
            }
        }
        outcome.epochs.push(summary);
        if outcome.loss_trace.len() >= budget {
            break;
        }
    }
    Ok(outcome)
}

fn train_step(
    model: &mut PrlModel,
    optimizer: &mut Adam,
    graph: &mut Graph,
    samples: &[&PromptSample],
    weighting: LossWeight,
    rng: &mut Rng,
) -> Result<f64> {
    graph.clear();
    let batch = PromptBatch::from_samples(samples.iter().copied());
    let targets: Vec<u32> = samples.iter().map(|s| s.action).collect();
    let weights: Vec<f64> = samples.iter().map(|s| weighting.weight(s)).collect();
    let p = model.params().bind(graph)?;
    let loss = model.loss(graph, &p, &batch, &targets, &weights, true, rng)?;
    let value = graph.value(loss).item().expect("scalar loss");
    let grads = graph.backward(loss)?;
    let per_param: Vec<_> = p.vars().iter().map(|&v| grads.get(v)).collect();
    optimizer.step(model.params_mut(), &per_param)?;
    Ok(value)
}
