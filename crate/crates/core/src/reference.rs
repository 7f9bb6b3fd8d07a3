//! The reference synthetic benchmark: a fixed task spec, training
//! configuration and seed set used to check the qualitative training
//! dynamics (vanishing advantages, variant ordering, advantage spread and
//! rethinking behavior).

use crate::env::TaskSpec;
use crate::optim::OptimizerKind;
use crate::telemetry::Stage;
use crate::trainer::{TrainConfig, Variant};

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub const NUM_QUERIES: usize = 16_384;

/// Default task mix at the benchmark size.
pub fn task_spec(seed: u64) -> TaskSpec {
    TaskSpec {
        num_queries: NUM_QUERIES,
        seed,
        ..TaskSpec::default()
    }
}

/// Plain gradient ascent with every step's rollouts filling exactly one
/// target batch (8 queries × 8 rollouts = 64 pairs).
pub fn train_config(variant: Variant, stage: Stage, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        stage,
        seed,
        optimizer: OptimizerKind::Sgd,
        lr: 0.4,
        queries_per_step: 8,
        target_pairs: 64,
        episode_queries: 128,
        epochs_max: 3,
        ..TrainConfig::default()
    };
    cfg.rethink.aux_weight = 0.3;
    cfg
}
