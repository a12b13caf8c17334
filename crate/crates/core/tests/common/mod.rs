#![allow(dead_code)]

use moth_core::config::RunConfig;
use moth_core::dataset::Dataset;
use moth_core::model::{Model, ModelConfig};
use moth_core::synth::{SplitSpec, WorldConfig};

pub fn small_model_config(horizon: usize) -> ModelConfig {
    ModelConfig { depth: 1, width: 8, heads: 2, horizon, bins: 8, ..ModelConfig::default() }
}

pub fn small_world(horizon: usize) -> WorldConfig {
    WorldConfig { horizon, ..WorldConfig::default() }
}

pub fn small_splits() -> SplitSpec {
    SplitSpec { train: 24, held_out_instruction: 6, held_out_layout: 6 }
}

pub fn small_dataset(cfg: &ModelConfig, seed: u64) -> Dataset {
    Dataset::generate(&small_world(cfg.horizon), &small_splits(), cfg, seed).unwrap()
}

pub fn small_model<T: moth_tensor::Scalar>(cfg: &ModelConfig, seed: u64) -> Model<T> {
    Model::init(cfg.clone(), &mut moth_core::rng::seeded(seed)).unwrap().cast()
}

/// Run configuration small enough for a few dozen steps in a test.
pub fn small_run(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    c.seed = seed;
    c.model = ModelConfig { depth: 2, width: 16, heads: 2, horizon: 5, bins: 16, ..ModelConfig::default() };
    c.world = small_world(5);
    c.splits = SplitSpec { train: 60, held_out_instruction: 8, held_out_layout: 8 };
    c.train.steps = 50;
    c.train.batch_size = 8;
    c.optim.warmup_steps = 5;
    c.sampling.eval_clips = 4;
    c.sampling.generations = 2;
    c.sampling.flow_steps = 3;
    c
}
