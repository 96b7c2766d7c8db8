//! Reduced-scale end-to-end setup: 32x32 frames, 12-step sequences,
//! compact networks and a compressed schedule.

use crate::data::{DataConfig, Motion};
use crate::model::{Variant, VtssiConfig};
use crate::schedule::{Curriculum, LrSchedule};
use crate::train::TrainConfig;

pub const FRAME_HW: [usize; 2] = [32, 32];
pub const SEQ_LEN: usize = 12;
pub const PREFIX: usize = 4;
pub const TRAIN_SEQUENCES: usize = 2000;
pub const TEST_SEQUENCES: usize = 200;
/// Observed frames at evaluation time.
pub const OBSERVE: usize = 6;
/// Total evaluated frames (observed plus generated).
pub const HORIZON: usize = 12;

pub fn data_config(seed: u64) -> DataConfig {
    DataConfig {
        frame_hw: FRAME_HW,
        seq_len: SEQ_LEN,
        min_objects: 1,
        max_objects: 2,
        motion: Motion::Linear,
        sprite_px: [8, 12],
        speed: [1.0, 2.0],
        seed,
        ..DataConfig::default()
    }
}

pub fn model_config(variant: Variant) -> VtssiConfig {
    VtssiConfig::compact(variant, FRAME_HW, SEQ_LEN, PREFIX, PREFIX)
}

pub fn train_config(variant: Variant, steps: u64, seed: u64) -> TrainConfig {
    let start = if variant == Variant::Vtssi { 6 } else { 1 };
    TrainConfig {
        steps,
        batch_size: 16,
        lr: LrSchedule {
            initial: 3e-4,
            decay_start: 10_000,
            decay_rate: 0.9,
            decay_every: 2_000,
            floor: 3e-5,
        },
        curriculum: Some(Curriculum { start, period: 1_500 }),
        log_every: 10,
        checkpoint_every: 1_000,
        seed,
        ..TrainConfig::default()
    }
}

/// Data seed of the held-out sequences.
pub const TEST_SEED: u64 = 9_001;

pub fn test_data() -> crate::Result<crate::data::Dataset> {
    crate::data::Dataset::generate(&data_config(TEST_SEED), TEST_SEQUENCES)
}

pub fn eval_options() -> crate::eval::EvalOptions {
    crate::eval::EvalOptions {
        observe: OBSERVE,
        horizon: HORIZON,
        ..crate::eval::EvalOptions::default()
    }
}

/// Training steps of the end-to-end reference runs.
pub fn e2e_steps(_variant: Variant) -> u64 {
    10_000
}
