//! Pseudo-gradient penalty: anomaly elimination, norm-based weighting and
//! clipping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::replica::PseudoGradient;
use crate::error::{invalid, Error, Result};
use crate::moe::MoeParams;
use crate::numcore::{ema_update, EmaState};
use crate::optimizer::clip_global_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w_j ∝ 1 / (norm_j + ε)`.
    InverseNorm,
    /// `w_j ∝ exp(−norm_j / temperature)`.
    SoftmaxNegNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaScope {
    PerWorker,
    /// One statistic over all included workers' norms.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    /// Disables detection, weighting by norm and clipping (plain averaging).
    pub enabled: bool,
    pub ema_decay: f64,
    pub anomaly_multiplier: f64,
    pub clip_threshold: f64,
    pub epsilon: f64,
    /// Observations per statistic before detection starts.
    pub warmup_rounds: u64,
    /// Lower bound on the deviation as a fraction of the EMA mean.
    pub min_relative_deviation: f64,
    pub weighting: Weighting,
    pub softmax_temperature: f64,
    pub ema_scope: EmaScope,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ema_decay: 0.9,
            anomaly_multiplier: 3.0,
            clip_threshold: 1.0,
            epsilon: 1e-8,
            warmup_rounds: 20,
            min_relative_deviation: 0.25,
            weighting: Weighting::InverseNorm,
            softmax_temperature: 1.0,
            ema_scope: EmaScope::PerWorker,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(invalid(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        if !(self.min_relative_deviation >= 0.0) {
            return Err(invalid("min_relative_deviation must be non-negative"));
        }
        for (name, v) in [
            ("anomaly_multiplier", self.anomaly_multiplier),
            ("clip_threshold", self.clip_threshold),
            ("epsilon", self.epsilon),
            ("softmax_temperature", self.softmax_temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub ema: EmaState,
    pub observations: u64,
}

/// EMA norm statistics keyed by worker (or a single shared entry).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyTracker {
    pub stats: BTreeMap<u32, NormStats>,
}

const SHARED_KEY: u32 = u32::MAX;

impl AnomalyTracker {
    fn key(scope: EmaScope, worker: u32) -> u32 {
        match scope {
            EmaScope::PerWorker => worker,
            EmaScope::Shared => SHARED_KEY,
        }
    }

    pub fn get(&self, scope: EmaScope, worker: u32) -> Option<&NormStats> {
        self.stats.get(&Self::key(scope, worker))
    }

    fn observe(&mut self, scope: EmaScope, worker: u32, norm: f64, decay: f64) -> Result<()> {
        let entry = self.stats.entry(Self::key(scope, worker));
        match entry {
            std::collections::btree_map::Entry::Vacant(v) => {
                v.insert(NormStats { ema: EmaState { mean: norm, deviation: 0.0 }, observations: 1 });
            }
            std::collections::btree_map::Entry::Occupied(mut o) => {
                let s = o.get_mut();
                s.ema = ema_update(s.ema, norm, decay)?;
                s.observations += 1;
            }
        }
        Ok(())
    }
}

/// Detection threshold `mean + m · max(dev, min_relative_deviation · mean)`.
pub fn anomaly_threshold(stats: &NormStats, config: &PenaltyConfig) -> f64 {
    let dev = stats.ema.deviation.max(config.min_relative_deviation * stats.ema.mean.abs());
    stats.ema.mean + config.anomaly_multiplier * dev
}

/// Excludes worker `j` when `norm_j > mean_j + m·dev_j` (once its statistic
/// has `warmup_rounds` observations) or when its norm is non-finite. If every
/// worker would be excluded the lowest finite norm is kept. Statistics are
/// then updated with the norms of included workers only, in worker order.
pub fn detect_anomalies(norms: &[(u32, f64)], tracker: &mut AnomalyTracker, config: &PenaltyConfig) -> Result<BTreeSet<u32>> {
    config.validate()?;
    if norms.is_empty() {
        return Err(invalid("anomaly detection needs at least one worker"));
    }
    let mut sorted = norms.to_vec();
    sorted.sort_by_key(|&(id, _)| id);
    let mut excluded = BTreeSet::new();
    for &(id, norm) in &sorted {
        let anomalous = !norm.is_finite()
            || tracker.get(config.ema_scope, id).is_some_and(|s| {
                s.observations >= config.warmup_rounds && norm > anomaly_threshold(s, config)
            });
        if anomalous {
            excluded.insert(id);
        }
    }
    if excluded.len() == sorted.len() {
        let keep = sorted
            .iter()
            .filter(|(_, n)| n.is_finite())
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .ok_or_else(|| Error::Anomaly("every pseudo-gradient norm is non-finite".into()))?;
        excluded.remove(&keep.0);
    }
    for &(id, norm) in &sorted {
        if !excluded.contains(&id) {
            tracker.observe(config.ema_scope, id, norm, config.ema_decay)?;
        }
    }
    Ok(excluded)
}

/// Normalized merge weights for `norms`, in the given order.
pub fn merge_weights(norms: &[f64], config: &PenaltyConfig) -> Result<Vec<f64>> {
    if norms.is_empty() {
        return Err(invalid("weighting needs at least one worker"));
    }
    let raw: Vec<f64> = if !config.enabled {
        vec![1.0; norms.len()]
    } else {
        match config.weighting {
            Weighting::InverseNorm => norms.iter().map(|n| 1.0 / (n + config.epsilon)).collect(),
            Weighting::SoftmaxNegNorm => {
                let lo = norms.iter().copied().fold(f64::INFINITY, f64::min);
                norms.iter().map(|n| (-(n - lo) / config.softmax_temperature).exp()).collect()
            }
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Anomaly(format!("merge weights sum to {total}")));
    }
    Ok(raw.iter().map(|w| w / total).collect())
}

/// Weighted sum of pseudo-gradients in worker order. Returns the merged
/// delta and the `(worker, weight)` pairs used.
pub fn weighted_average(grads: &[&PseudoGradient], config: &PenaltyConfig) -> Result<(MoeParams, Vec<(u32, f64)>)> {
    let mut sorted: Vec<&PseudoGradient> = grads.to_vec();
    sorted.sort_by_key(|g| g.worker_id);
    let norms: Vec<f64> = sorted.iter().map(|g| g.norm).collect();
    let weights = merge_weights(&norms, config)?;
    let merged = weighted_sum(sorted.iter().map(|g| &g.delta), &weights)?;
    Ok((merged, sorted.iter().map(|g| g.worker_id).zip(weights).collect()))
}

/// `Σ w_j x_j`, seeded with `w_0 · x_0` so a singleton is reproduced exactly.
pub(crate) fn weighted_sum<'a>(items: impl IntoIterator<Item = &'a MoeParams>, weights: &[f64]) -> Result<MoeParams> {
    let mut iter = items.into_iter().zip(weights);
    let (first, &w0) = iter.next().ok_or_else(|| invalid("empty weighted sum"))?;
    let mut acc = first.clone();
    acc.scale(w0);
    for (x, &w) in iter {
        acc.axpy(w, x)?;
    }
    Ok(acc)
}

/// Global-norm clip of the merged delta; returns `(pre, post)` norms.
pub fn clip_pseudo_gradient(delta: &mut MoeParams, threshold: f64) -> Result<(f64, f64)> {
    let pre = clip_global_norm(delta.tensors_mut(), threshold)?;
    Ok((pre, delta.global_norm()))
}
