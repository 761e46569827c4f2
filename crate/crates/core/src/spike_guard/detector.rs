//! Robust loss-spike detection.
//!
//! A loss is a spike when it exceeds `median + narrow_k · spread` of the
//! recent non-spike window, where spread is the median absolute deviation
//! (floored at `mad_floor · |median|`). A run of `wide_run_len` consecutive
//! spikes, a spike of at least `severe_ratio × median`, or any non-finite
//! loss is a wide spike. After `rebaseline_after` consecutive spikes the
//! window is cleared so a persistent level shift becomes the new baseline.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeClass {
    Normal,
    NarrowSpike,
    WideSpike,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeConfig {
    pub window: usize,
    pub narrow_k: f64,
    pub wide_run_len: usize,
    /// Window size below which every finite loss is classified normal.
    pub min_history: usize,
    pub mad_floor: f64,
    /// A spike at or above this multiple of the median is wide at once.
    pub severe_ratio: f64,
    /// Consecutive spikes after which the window is discarded.
    pub rebaseline_after: usize,
    pub backoff_factor: f64,
    pub retry_horizon: usize,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        Self {
            window: 64,
            narrow_k: 4.0,
            wide_run_len: 3,
            min_history: 8,
            mad_floor: 1e-3,
            severe_ratio: 10.0,
            rebaseline_after: 16,
            backoff_factor: 0.5,
            retry_horizon: 50,
        }
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite window"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeDetector {
    pub config: SpikeConfig,
    window: VecDeque<f64>,
    consecutive: usize,
}

impl SpikeDetector {
    pub fn new(config: SpikeConfig) -> Self {
        Self { window: VecDeque::with_capacity(config.window), config, consecutive: 0 }
    }

    /// `(median, spread)` of the current window, or `None` before
    /// `min_history` losses have been accepted.
    pub fn center_spread(&self) -> Option<(f64, f64)> {
        if self.window.len() < self.config.min_history.max(1) {
            return None;
        }
        let mut w: Vec<f64> = self.window.iter().copied().collect();
        let med = median(&mut w);
        let mut dev: Vec<f64> = w.iter().map(|v| (v - med).abs()).collect();
        let mad = median(&mut dev);
        Some((med, mad.max(self.config.mad_floor * med.abs())))
    }

    pub fn threshold(&self) -> Option<f64> {
        self.center_spread().map(|(m, s)| m + self.config.narrow_k * s)
    }

    pub fn consecutive_spikes(&self) -> usize {
        self.consecutive
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn observe(&mut self, loss: f64) -> SpikeClass {
        if !loss.is_finite() {
            self.consecutive += 1;
            return SpikeClass::WideSpike;
        }
        let center = self.center_spread();
        let spike = center.is_some_and(|(m, s)| loss > m + self.config.narrow_k * s);
        if !spike {
            self.consecutive = 0;
            if self.window.len() == self.config.window {
                self.window.pop_front();
            }
            self.window.push_back(loss);
            return SpikeClass::Normal;
        }
        self.consecutive += 1;
        let severe = center.is_some_and(|(m, _)| m > 0.0 && loss >= self.config.severe_ratio * m);
        if self.consecutive >= self.config.rebaseline_after {
            self.window.clear();
        }
        if severe || self.consecutive >= self.config.wide_run_len {
            SpikeClass::WideSpike
        } else {
            SpikeClass::NarrowSpike
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeAction {
    /// Apply the update normally.
    Proceed,
    /// Leave parameters and optimizer state untouched; re-inject the batch.
    SkipAndRetry,
    /// The batch was already skipped and retried and spiked again: apply its
    /// update at `backoff_factor × lr` for this step only.
    SkipRetryAndBackoff,
}

/// Decision for one step. `contains_retry` is whether the step's data
/// includes a batch that was previously skipped.
pub fn on_spike(class: SpikeClass, contains_retry: bool) -> SpikeAction {
    match (class, contains_retry) {
        (SpikeClass::WideSpike, false) => SpikeAction::SkipAndRetry,
        (SpikeClass::WideSpike, true) => SpikeAction::SkipRetryAndBackoff,
        _ => SpikeAction::Proceed,
    }
}

/// Learning rate actually applied for `action`; `None` means no update.
pub fn effective_lr(action: SpikeAction, lr: f64, backoff_factor: f64) -> Option<f64> {
    match action {
        SpikeAction::Proceed => Some(lr),
        SpikeAction::SkipAndRetry => None,
        SpikeAction::SkipRetryAndBackoff => Some(lr * backoff_factor),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub step: u64,
    pub worker: u32,
    pub loss: f64,
    pub classification: SpikeClass,
    pub action: SpikeAction,
    pub effective_lr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::RngStream;

    fn warm(detector: &mut SpikeDetector) {
        for i in 0..20 {
            assert_eq!(detector.observe(1.0 + 0.01 * (i % 7) as f64), SpikeClass::Normal);
        }
    }

    #[test]
    fn single_outlier_is_narrow() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        warm(&mut d);
        let (med, mad) = d.center_spread().unwrap();
        assert_eq!(d.observe(med + 10.0 * mad), SpikeClass::NarrowSpike);
        assert_eq!(d.observe(1.05), SpikeClass::Normal);
        assert_eq!(d.consecutive_spikes(), 0);
    }

    #[test]
    fn constant_window_uses_floor() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        for _ in 0..10 {
            d.observe(2.0);
        }
        let (med, spread) = d.center_spread().unwrap();
        assert_eq!(med, 2.0);
        assert_eq!(spread, 2e-3);
        assert_eq!(d.observe(med + 10.0 * spread), SpikeClass::NarrowSpike);
    }

    #[test]
    fn third_consecutive_spike_is_wide() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        warm(&mut d);
        let (med, mad) = d.center_spread().unwrap();
        let x = med + 10.0 * mad;
        assert_eq!(d.observe(x), SpikeClass::NarrowSpike);
        assert_eq!(d.observe(x), SpikeClass::NarrowSpike);
        assert_eq!(d.observe(x), SpikeClass::WideSpike);
        // spikes never enter the window
        assert_eq!(d.window_len(), 20);
    }

    #[test]
    fn non_finite_is_wide_immediately() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        assert_eq!(d.observe(f64::NAN), SpikeClass::WideSpike);
        assert_eq!(d.observe(f64::INFINITY), SpikeClass::WideSpike);
    }

    #[test]
    fn replay_oracle_on_scripted_trace() {
        let cfg = SpikeConfig::default();
        let mut rng = RngStream::new(17, 0);
        let trace: Vec<f64> = (0..200)
            .map(|i| {
                let base = 3.0 * (-(i as f64) / 150.0).exp() + 0.05 * rng.normal();
                if (60..62).contains(&i) || (120..125).contains(&i) || i == 170 {
                    base + 2.0
                } else if i == 150 {
                    base * 30.0
                } else if (175..195).contains(&i) {
                    base + 1.5
                } else {
                    base
                }
            })
            .collect();

        // direct rule replay with an explicit list as the window
        let mut window: Vec<f64> = Vec::new();
        let mut run = 0usize;
        let mut expected = Vec::new();
        for &loss in &trace {
            let thr = if window.len() >= cfg.min_history {
                let mut w = window.clone();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let med = if w.len() % 2 == 1 { w[w.len() / 2] } else { 0.5 * (w[w.len() / 2 - 1] + w[w.len() / 2]) };
                let mut dev: Vec<f64> = w.iter().map(|v| (v - med).abs()).collect();
                dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mad = if dev.len() % 2 == 1 {
                    dev[dev.len() / 2]
                } else {
                    0.5 * (dev[dev.len() / 2 - 1] + dev[dev.len() / 2])
                };
                Some((med + cfg.narrow_k * mad.max(cfg.mad_floor * med.abs()), med))
            } else {
                None
            };
            if let Some((t, med)) = thr.filter(|&(t, _)| loss > t) {
                run += 1;
                let severe = med > 0.0 && loss >= cfg.severe_ratio * med;
                if run >= cfg.rebaseline_after {
                    window.clear();
                }
                expected.push(if run >= cfg.wide_run_len || severe { SpikeClass::WideSpike } else { SpikeClass::NarrowSpike });
                let _ = t;
            } else {
                run = 0;
                window.push(loss);
                if window.len() > cfg.window {
                    window.remove(0);
                }
                expected.push(SpikeClass::Normal);
            }
        }

        let mut d = SpikeDetector::new(cfg);
        let got: Vec<SpikeClass> = trace.iter().map(|&l| d.observe(l)).collect();
        assert_eq!(got, expected);
        assert!(got.contains(&SpikeClass::WideSpike));
        assert!(got.contains(&SpikeClass::NarrowSpike));
        // the severe outlier is wide on its own
        assert_eq!(got[150], SpikeClass::WideSpike);
        assert_eq!(got[149], SpikeClass::Normal);
        // the long plateau is re-baselined and then accepted
        assert_eq!(got[194], SpikeClass::Normal);
    }

    #[test]
    fn severe_outlier_is_wide_at_once() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        warm(&mut d);
        assert_eq!(d.observe(1e4), SpikeClass::WideSpike);
        assert_eq!(d.consecutive_spikes(), 1);
        let mut literal = SpikeDetector::new(SpikeConfig { severe_ratio: f64::INFINITY, ..Default::default() });
        warm(&mut literal);
        assert_eq!(literal.observe(1e4), SpikeClass::NarrowSpike);
    }

    #[test]
    fn persistent_shift_is_rebaselined() {
        let mut d = SpikeDetector::new(SpikeConfig::default());
        warm(&mut d);
        let classes: Vec<SpikeClass> = (0..40).map(|_| d.observe(2.0)).collect();
        assert_eq!(classes[15], SpikeClass::WideSpike);
        assert!(classes[16..].iter().all(|&c| c == SpikeClass::Normal));
    }

    #[test]
    fn actions() {
        assert_eq!(on_spike(SpikeClass::NarrowSpike, false), SpikeAction::Proceed);
        assert_eq!(on_spike(SpikeClass::Normal, true), SpikeAction::Proceed);
        assert_eq!(on_spike(SpikeClass::WideSpike, false), SpikeAction::SkipAndRetry);
        assert_eq!(on_spike(SpikeClass::WideSpike, true), SpikeAction::SkipRetryAndBackoff);
        assert_eq!(effective_lr(SpikeAction::SkipRetryAndBackoff, 2e-4, 0.5), Some(1e-4));
        assert_eq!(effective_lr(SpikeAction::SkipAndRetry, 2e-4, 0.5), None);
    }
}
