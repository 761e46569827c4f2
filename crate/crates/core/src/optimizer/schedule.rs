//! Learning-rate and batch-size schedules.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const DEFAULT_MAX_LR: f64 = 2.4e-4;
pub const DEFAULT_WARMUP_STEPS: u64 = 2000;
pub const DEFAULT_HALVE_FRACTION: f64 = 0.6;
pub const DEFAULT_ANNEAL_START: f64 = 1.2e-4;
pub const DEFAULT_ANNEAL_END: f64 = 1.2e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    /// Linear warmup to `max_lr`, constant, then halved at
    /// `halve_fraction · total_steps`.
    WarmupStableDecay { max_lr: f64, warmup_steps: u64, halve_fraction: f64 },
    /// `start / sqrt(1 + c·s)` reaching `end` at `anneal_steps`.
    InverseSqrt { start_lr: f64, end_lr: f64, anneal_steps: u64 },
    Constant { lr: f64 },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::WarmupStableDecay {
            max_lr: DEFAULT_MAX_LR,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            halve_fraction: DEFAULT_HALVE_FRACTION,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, step: u64, total_steps: u64) -> f64 {
        match *self {
            LrSchedule::WarmupStableDecay { .. } => wsd_lr(step, total_steps, self),
            LrSchedule::InverseSqrt { start_lr, end_lr, anneal_steps } => {
                inv_sqrt_lr(step, anneal_steps, start_lr, end_lr)
            }
            LrSchedule::Constant { lr } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::WarmupStableDecay { max_lr, halve_fraction, .. } => {
                max_lr >= 0.0 && (0.0..=1.0).contains(&halve_fraction)
            }
            LrSchedule::InverseSqrt { start_lr, end_lr, anneal_steps } => {
                start_lr > 0.0 && end_lr > 0.0 && end_lr <= start_lr && anneal_steps >= 1
            }
            LrSchedule::Constant { lr } => lr >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// First step at which the stable phase is halved.
pub fn halve_boundary(total_steps: u64, halve_fraction: f64) -> u64 {
    (halve_fraction * total_steps as f64).round() as u64
}

/// Warmup-stable-decay schedule. Non-WSD schedules fall through to their
/// own rule.
pub fn wsd_lr(step: u64, total_steps: u64, schedule: &LrSchedule) -> f64 {
    match *schedule {
        LrSchedule::WarmupStableDecay { max_lr, warmup_steps, halve_fraction } => {
            if step < warmup_steps {
                max_lr * step as f64 / warmup_steps as f64
            } else if step >= halve_boundary(total_steps, halve_fraction) {
                max_lr / 2.0
            } else {
                max_lr
            }
        }
        _ => schedule.lr(step, total_steps),
    }
}

/// Inverse-square-root annealing from `start` to `end` over `anneal_steps`,
/// held at `end` afterwards.
pub fn inv_sqrt_lr(step: u64, anneal_steps: u64, start: f64, end: f64) -> f64 {
    let anneal_steps = anneal_steps.max(1);
    let c = ((start / end).powi(2) - 1.0) / anneal_steps as f64;
    let s = step.min(anneal_steps) as f64;
    start / (1.0 + c * s).sqrt()
}

/// Staircase batch-size warmup: doubles at each boundary, clamped to
/// `maximum`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeSchedule {
    pub initial: usize,
    pub maximum: usize,
    /// Sorted step boundaries at which the batch size doubles.
    pub boundaries: Vec<u64>,
}

impl Default for BatchSizeSchedule {
    fn default() -> Self {
        Self { initial: 2560, maximum: 8960, boundaries: vec![1000, 2000] }
    }
}

impl BatchSizeSchedule {
    pub fn constant(size: usize) -> Self {
        Self { initial: size, maximum: size, boundaries: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial == 0 || self.maximum < self.initial {
            return Err(invalid("batch schedule needs 0 < initial <= maximum"));
        }
        if self.boundaries.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid("batch schedule boundaries must be sorted"));
        }
        Ok(())
    }
}

pub fn batch_size_at(step: u64, schedule: &BatchSizeSchedule) -> usize {
    let doublings = schedule.boundaries.iter().filter(|&&b| step >= b).count() as u32;
    let size = schedule.initial.saturating_mul(1usize.checked_shl(doublings).unwrap_or(usize::MAX));
    size.min(schedule.maximum)
}

/// The first step at which cumulative samples reach `fraction` of the
/// samples consumed over `total_steps`.
pub fn token_fraction_step(schedule: &BatchSizeSchedule, total_steps: u64, fraction: f64) -> u64 {
    let total: f64 = (0..total_steps).map(|s| batch_size_at(s, schedule) as f64).sum();
    let target = fraction * total;
    let mut acc = 0.0;
    for s in 0..total_steps {
        if acc >= target {
            return s;
        }
        acc += batch_size_at(s, schedule) as f64;
    }
    total_steps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wsd_fixed_points() {
        let s = LrSchedule::default();
        let total = 10_000;
        assert_eq!(wsd_lr(0, total, &s), 0.0);
        assert!((wsd_lr(1000, total, &s) - 1.2e-4).abs() < 1e-18);
        assert_eq!(wsd_lr(2000, total, &s), 2.4e-4);
        assert_eq!(wsd_lr(5999, total, &s), 2.4e-4);
        assert_eq!(wsd_lr(6000, total, &s), 1.2e-4);
        assert_eq!(wsd_lr(9999, total, &s), 1.2e-4);
    }

    #[test]
    fn wsd_only_jumps_at_halving() {
        let s = LrSchedule::default();
        let total = 10_000;
        let max_step = 2.4e-4 / 2000.0;
        for step in 1..total {
            let jump = (wsd_lr(step, total, &s) - wsd_lr(step - 1, total, &s)).abs();
            if step == 6000 {
                assert!((jump - 1.2e-4).abs() < 1e-18);
            } else {
                assert!(jump <= max_step * (1.0 + 1e-9), "jump {jump} at {step}");
            }
        }
    }

    #[test]
    fn inv_sqrt_endpoints_and_monotone() {
        let n = 5000;
        assert_eq!(inv_sqrt_lr(0, n, 1.2e-4, 1.2e-8), 1.2e-4);
        let end = inv_sqrt_lr(n - 1, n, 1.2e-4, 1.2e-8);
        assert!(end > 1.2e-8);
        let last = 1.2e-4 / (1.0 + ((1e4f64).powi(2) - 1.0)).sqrt();
        assert!((last - 1.2e-8).abs() / 1.2e-8 < 1e-12);
        assert!((inv_sqrt_lr(n, n, 1.2e-4, 1.2e-8) - 1.2e-8).abs() / 1.2e-8 < 1e-12);
        let mut prev = f64::INFINITY;
        for i in 0..1000 {
            let lr = inv_sqrt_lr(i * n / 1000, n, 1.2e-4, 1.2e-8);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn batch_staircase() {
        let s = BatchSizeSchedule::default();
        assert_eq!(batch_size_at(0, &s), 2560);
        assert_eq!(batch_size_at(999, &s), 2560);
        assert_eq!(batch_size_at(1000, &s), 5120);
        assert_eq!(batch_size_at(2000, &s), 8960);
        assert_eq!(batch_size_at(1_000_000, &s), 8960);
        let mut prev = 0;
        for step in 0..5000 {
            let b = batch_size_at(step, &s);
            assert!(b >= prev && b <= 8960);
            prev = b;
        }
    }

    #[test]
    fn token_fraction_accounts_for_ramp() {
        let s = BatchSizeSchedule::constant(4);
        assert_eq!(token_fraction_step(&s, 100, 0.6), 60);
        let ramp = BatchSizeSchedule { initial: 1, maximum: 4, boundaries: vec![10, 20] };
        // ramp consumes fewer samples early, so the boundary falls later
        assert!(token_fraction_step(&ramp, 100, 0.6) > 60);
    }
}
