//! Step-indexed training schedules: curriculum length, learning rate,
//! count-prior location and mask flattening.

use serde::{Deserialize, Serialize};

use crate::model::Variant;

/// Sequence-prefix curriculum: `min(start + floor(step / period), t_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Curriculum {
    pub start: usize,
    pub period: u64,
}

impl Curriculum {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Vtssi => Self {
                start: 6,
                period: 30_000,
            },
            _ => Self {
                start: 1,
                period: 20_000,
            },
        }
    }

    pub fn len(&self, step: u64, t_max: usize) -> usize {
        let grown = self.start as u64 + step / self.period.max(1);
        (grown.min(t_max as u64) as usize).max(1)
    }

    /// Zero-based index of the curriculum stage containing `step`.
    pub fn stage(&self, step: u64) -> u64 {
        step / self.period.max(1)
    }
}

pub fn curriculum_len(step: u64, variant: Variant, t_max: usize) -> usize {
    Curriculum::for_variant(variant).len(step, t_max)
}

/// Constant learning rate, then smooth exponential decay to a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_start: u64,
    pub decay_rate: f64,
    pub decay_every: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-4,
            decay_start: 200_000,
            decay_rate: 0.9,
            decay_every: 20_000,
            floor: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if step <= self.decay_start {
            return self.initial;
        }
        let e = (step - self.decay_start) as f64 / self.decay_every as f64;
        (self.initial * self.decay_rate.powf(e)).max(self.floor)
    }
}

/// Linear annealing of the count prior location between two steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CntPriorSchedule {
    pub start_loc: f64,
    pub end_loc: f64,
    pub anneal_start: u64,
    pub anneal_end: u64,
    pub scale: f64,
}

impl Default for CntPriorSchedule {
    fn default() -> Self {
        Self {
            start_loc: -2.0,
            end_loc: -3.0,
            anneal_start: 100_000,
            anneal_end: 200_000,
            scale: 1.0,
        }
    }
}

impl CntPriorSchedule {
    pub fn loc(&self, step: u64) -> f64 {
        if step <= self.anneal_start {
            self.start_loc
        } else if step >= self.anneal_end {
            self.end_loc
        } else {
            let f = (step - self.anneal_start) as f64 / (self.anneal_end - self.anneal_start) as f64;
            self.start_loc + f * (self.end_loc - self.start_loc)
        }
    }
}

/// Mask flattening parameter: `+increment` after every `every` steps, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlattenSchedule {
    pub increment: f64,
    pub every: u64,
    pub max: f64,
}

impl Default for FlattenSchedule {
    fn default() -> Self {
        Self {
            increment: 0.1,
            every: 1000,
            max: 100.0,
        }
    }
}

impl FlattenSchedule {
    pub fn p(&self, step: u64) -> f64 {
        ((step / self.every.max(1)) as f64 * self.increment).min(self.max)
    }
}
