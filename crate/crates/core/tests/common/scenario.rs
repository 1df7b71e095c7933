//! Synthetic end-to-end setups for training-dependent checks.
#![allow(dead_code)]

use prl::data::{
    generate_prompts, split_dataset, synth_corpus, DatasetSplit, DiscountMode, PromptSample, RewardConfig,
    StepRewardAverages, SynthConfig, SynthWorld,
};
use prl::encoders::EncoderKind;
use prl::model::{train, ModelConfig, NoopObserver, PrlModel, TrainConfig, TrainOutcome};
use prl::tensor::{Adam, AdamConfig};

pub struct Prepared {
    pub world: SynthWorld,
    pub split: DatasetSplit,
    pub rewards: RewardConfig,
    pub prompts: Vec<PromptSample>,
    pub averages: StepRewardAverages,
}

/// Rewards used for the synthetic checks: discount relative to the current
/// step, so the reward signal does not vanish with `t`.
pub fn synthetic_rewards() -> RewardConfig {
    RewardConfig {
        discount_mode: DiscountMode::Relative,
        ..RewardConfig::default()
    }
}

pub fn prepare(synth: &SynthConfig, rewards: RewardConfig) -> Prepared {
    let world = synth.world().unwrap();
    let sessions = synth_corpus(synth).unwrap();
    let split = split_dataset(sessions, synth.seed).unwrap();
    let prompts = generate_prompts(&split.train, &rewards).unwrap();
    let averages = StepRewardAverages::from_prompts(&prompts).unwrap();
    Prepared {
        world,
        split,
        rewards,
        prompts,
        averages,
    }
}

pub fn model_config(n_items: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        n_items,
        dim,
        encoder: EncoderKind::Gru,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn fit(config: ModelConfig, train_cfg: &TrainConfig, prompts: &[PromptSample]) -> (PrlModel, TrainOutcome) {
    let mut model = PrlModel::new(config, train_cfg.seed).unwrap();
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: train_cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let out = train(&mut model, &mut adam, prompts, train_cfg, &mut NoopObserver).unwrap();
    assert!(out.halted.is_none(), "{:?}", out.halted);
    (model, out)
}
