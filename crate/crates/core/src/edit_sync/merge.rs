//! One synchronization round: detect → weight → clip → outer update →
//! broadcast.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::penalty::{clip_pseudo_gradient, detect_anomalies, weighted_average, weighted_sum, AnomalyTracker, PenaltyConfig};
use super::replica::{compute_pseudo_gradient, PseudoGradient, WorkerReplica};
use super::sync::SyncPolicy;
use crate::error::{invalid, Result};
use crate::moe::MoeParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EditConfig {
    pub n_workers: u32,
    pub policy: SyncPolicy,
    pub penalty: PenaltyConfig,
    pub outer_lr: f64,
    /// Heavy-ball momentum on the merged delta; 0 disables it.
    pub outer_momentum: f64,
    /// Run local rounds on the rayon pool.
    pub parallel: bool,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_workers: 4,
            policy: SyncPolicy::EveryHSteps { h: 4 },
            penalty: PenaltyConfig::default(),
            outer_lr: 1.0,
            outer_momentum: 0.0,
            parallel: false,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(invalid("at least one worker required"));
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return Err(invalid(format!("outer_lr must be positive, got {}", self.outer_lr)));
        }
        if !(0.0..1.0).contains(&self.outer_momentum) {
            return Err(invalid(format!("outer_momentum {} outside [0, 1)", self.outer_momentum)));
        }
        self.policy.validate()?;
        self.penalty.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Scale the worker's pseudo-gradient by `factor`.
    Corrupt { factor: f64 },
    /// Leave the worker out of the merge entirely.
    Exclude,
}

/// Fault applied to one worker from round `from_round` onward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub worker: u32,
    pub from_round: u64,
    pub mode: FaultMode,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MergeState {
    pub round: u64,
    pub tracker: AnomalyTracker,
    pub momentum: Option<MoeParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub included_workers: Vec<u32>,
    pub excluded_workers: Vec<u32>,
    pub norms: BTreeMap<u32, f64>,
    pub weights: BTreeMap<u32, f64>,
    pub local_steps: BTreeMap<u32, u64>,
    pub merged_norm_pre_clip: f64,
    pub merged_norm_post_clip: f64,
    pub anchor_loss: Option<f64>,
}

/// `θ − outer_lr · Δ`.
pub fn outer_update(anchor: &MoeParams, delta: &MoeParams, outer_lr: f64) -> Result<MoeParams> {
    if !(outer_lr > 0.0) {
        return Err(invalid(format!("outer_lr must be positive, got {outer_lr}")));
    }
    let mut next = anchor.clone();
    next.axpy(-outer_lr, delta)?;
    Ok(next)
}

/// Merges all workers into `anchor` and resets every worker to it.
///
/// When the merged delta is an unclipped, unmodified weighted average and no
/// momentum is used, `θ − lr·Δ` is evaluated as `Σ w_j θ_j + (1 − lr)·Δ`, which
/// is the same quantity but reproduces a single worker's parameters exactly.
pub fn merge_round(
    anchor: &mut MoeParams,
    workers: &mut [WorkerReplica],
    state: &mut MergeState,
    config: &EditConfig,
    fault: Option<&FaultPlan>,
) -> Result<RoundRecord> {
    config.validate()?;
    if workers.is_empty() {
        return Err(invalid("merge needs at least one worker"));
    }
    let mut order: Vec<usize> = (0..workers.len()).collect();
    order.sort_by_key(|&i| workers[i].worker_id);

    let active_fault = fault.filter(|f| state.round >= f.from_round);
    let mut forced = BTreeSet::new();
    let mut altered = BTreeSet::new();
    let mut grads: Vec<PseudoGradient> = Vec::with_capacity(workers.len());
    for &i in &order {
        let mut pg = compute_pseudo_gradient(anchor, &workers[i])?;
        if let Some(f) = active_fault.filter(|f| f.worker == pg.worker_id) {
            match f.mode {
                FaultMode::Corrupt { factor } => {
                    pg = pg.scaled(factor);
                    altered.insert(pg.worker_id);
                }
                FaultMode::Exclude => {
                    forced.insert(pg.worker_id);
                }
            }
        }
        grads.push(pg);
    }
    if forced.len() == grads.len() {
        return Err(invalid("fault plan excludes every worker"));
    }

    let candidates: Vec<(u32, f64)> =
        grads.iter().filter(|g| !forced.contains(&g.worker_id)).map(|g| (g.worker_id, g.norm)).collect();
    let mut excluded = if config.penalty.enabled {
        detect_anomalies(&candidates, &mut state.tracker, &config.penalty)?
    } else {
        BTreeSet::new()
    };
    excluded.extend(forced);

    let included: Vec<&PseudoGradient> = grads.iter().filter(|g| !excluded.contains(&g.worker_id)).collect();
    let (mut merged, weights) = weighted_average(&included, &config.penalty)?;
    let (pre, post) = if config.penalty.enabled {
        clip_pseudo_gradient(&mut merged, config.penalty.clip_threshold)?
    } else {
        let n = merged.global_norm();
        (n, n)
    };

    let clipped = post != pre;
    let exact = !clipped && config.outer_momentum == 0.0 && included.iter().all(|g| !altered.contains(&g.worker_id));
    let next = if exact {
        let locals = included.iter().map(|g| {
            let i = order.iter().copied().find(|&i| workers[i].worker_id == g.worker_id).expect("worker present");
            workers[i].model.params()
        });
        let w: Vec<f64> = weights.iter().map(|&(_, w)| w).collect();
        let mut next = weighted_sum(locals, &w)?;
        if config.outer_lr != 1.0 {
            next.axpy(1.0 - config.outer_lr, &merged)?;
        }
        next
    } else if config.outer_momentum > 0.0 {
        let u = match state.momentum.take() {
            Some(mut u) => {
                u.scale(config.outer_momentum);
                u.axpy(1.0, &merged)?;
                u
            }
            None => merged.clone(),
        };
        let next = outer_update(anchor, &u, config.outer_lr)?;
        state.momentum = Some(u);
        next
    } else {
        outer_update(anchor, &merged, config.outer_lr)?
    };

    let record = RoundRecord {
        round: state.round,
        included_workers: weights.iter().map(|&(id, _)| id).collect(),
        excluded_workers: excluded.iter().copied().collect(),
        norms: grads.iter().map(|g| (g.worker_id, g.norm)).collect(),
        weights: weights.iter().copied().collect(),
        local_steps: workers.iter().map(|w| (w.worker_id, w.local_steps)).collect(),
        merged_norm_pre_clip: pre,
        merged_norm_post_clip: post,
        anchor_loss: None,
    };

    for w in workers.iter_mut() {
        w.model.set_params(next.clone())?;
        w.local_steps = 0;
    }
    *anchor = next;
    state.round += 1;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit_sync::penalty::merge_weights;
    use crate::moe::{MoeConfig, MoeModel};
    use crate::numcore::RngStream;
    use crate::optimizer::{AdamWConfig, AdamWState};

    fn small() -> MoeConfig {
        MoeConfig { d_model: 4, n_experts: 3, k_top: 1, d_expert_hidden: 3, d_shared_hidden: 2, vocab: 3, ..Default::default() }
    }

    fn workers_around(anchor: &MoeParams, shifts: &[f64]) -> Vec<WorkerReplica> {
        shifts
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let mut p = anchor.clone();
                let mut noise = MoeParams::init(&small(), &mut RngStream::new(100 + i as u64, 0)).unwrap();
                noise.scale(s);
                p.axpy(1.0, &noise).unwrap();
                let model = MoeModel::from_parts(small(), p, crate::moe::RouterState::new(0)).unwrap();
                let opt = AdamWState::new(AdamWConfig::default(), model.params().tensors());
                WorkerReplica::new(i as u32, model, opt, RngStream::new(7, i as u64), None)
            })
            .collect()
    }

    fn anchor() -> MoeParams {
        MoeParams::init(&small(), &mut RngStream::new(1, 1)).unwrap()
    }

    #[test]
    fn consensus_after_round() {
        let mut a = anchor();
        let mut ws = workers_around(&a, &[0.01, 0.02, 0.03, 0.04]);
        let mut st = MergeState::default();
        let cfg = EditConfig::default();
        merge_round(&mut a, &mut ws, &mut st, &cfg, None).unwrap();
        for w in &ws {
            assert_eq!(w.model.params(), &a);
            assert_eq!(w.local_steps, 0);
        }
    }

    #[test]
    fn identical_workers_recover_local_params() {
        let mut a = anchor();
        let mut ws = workers_around(&a, &[0.01]);
        let w1 = ws[0].clone();
        ws.push(WorkerReplica { worker_id: 1, ..w1.clone() });
        let local = w1.model.params().clone();
        let cfg = EditConfig { penalty: PenaltyConfig { clip_threshold: 1e9, ..Default::default() }, ..Default::default() };
        merge_round(&mut a, &mut ws, &mut MergeState::default(), &cfg, None).unwrap();
        for (x, y) in a.tensors().iter().zip(local.tensors()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_delta_leaves_anchor() {
        let a0 = anchor();
        let mut a = a0.clone();
        let mut ws = workers_around(&a, &[0.0, 0.0]);
        merge_round(&mut a, &mut ws, &mut MergeState::default(), &EditConfig { outer_lr: 0.7, ..Default::default() }, None)
            .unwrap();
        assert_eq!(a, a0);
        let z = a0.zeros_like();
        assert_eq!(outer_update(&a0, &z, 0.3).unwrap(), a0);
        assert!(outer_update(&a0, &z, 0.0).is_err());
    }

    #[test]
    fn scripted_round_matches_reference_pipeline() {
        let a0 = anchor();
        let shifts = [0.05, 0.0505, 0.6];
        let cfg = EditConfig {
            n_workers: 3,
            outer_lr: 0.8,
            penalty: PenaltyConfig { clip_threshold: 0.5, warmup_rounds: 0, ..Default::default() },
            ..Default::default()
        };
        // warm the tracker with one homogeneous round
        let mut st = MergeState::default();
        let mut a = a0.clone();
        let mut ws = workers_around(&a, &[0.05, 0.05, 0.05]);
        merge_round(&mut a, &mut ws, &mut st, &cfg, None).unwrap();
        let tracker = st.tracker.clone();
        let a1 = a.clone();

        let mut ws = workers_around(&a1, &shifts);
        let locals: Vec<MoeParams> = ws.iter().map(|w| w.model.params().clone()).collect();
        let rec = merge_round(&mut a, &mut ws, &mut st, &cfg, None).unwrap();

        // reference: direct evaluation of each stage
        let deltas: Vec<Vec<f64>> = locals
            .iter()
            .map(|l| {
                a1.tensors()
                    .iter()
                    .zip(l.tensors())
                    .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(u, v)| u - v).collect::<Vec<_>>())
                    .collect()
            })
            .collect();
        let norms: Vec<f64> = deltas.iter().map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let included: Vec<usize> = (0..3)
            .filter(|&j| {
                let s = tracker.stats[&(j as u32)];
                !(norms[j] > s.ema.mean + 3.0 * s.ema.deviation.max(0.05 * s.ema.mean))
            })
            .collect();
        assert_eq!(rec.excluded_workers, vec![2]);
        assert_eq!(included, vec![0, 1]);
        let inv: Vec<f64> = included.iter().map(|&j| 1.0 / (norms[j] + 1e-8)).collect();
        let total: f64 = inv.iter().sum();
        let mut merged = vec![0.0; deltas[0].len()];
        for (k, &j) in included.iter().enumerate() {
            for (m, d) in merged.iter_mut().zip(&deltas[j]) {
                *m += inv[k] / total * d;
            }
        }
        let mn = merged.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((rec.merged_norm_pre_clip - mn).abs() < 1e-12);
        let scale = if mn > 0.5 { 0.5 / mn } else { 1.0 };
        let flat_anchor: Vec<f64> = a1.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let expected: Vec<f64> = flat_anchor.iter().zip(&merged).map(|(p, m)| p - 0.8 * scale * m).collect();
        let got: Vec<f64> = a.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
        assert_eq!(rec.weights.len(), 2);
        let w = merge_weights(&[norms[0], norms[1]], &cfg.penalty).unwrap();
        assert_eq!(rec.weights[&0], w[0]);
    }

    #[test]
    fn corrupted_worker_matches_leave_one_out() {
        let run = |mode: FaultMode| {
            let mut a = anchor();
            let mut st = MergeState::default();
            let cfg = EditConfig { penalty: PenaltyConfig { clip_threshold: 1e9, ..Default::default() }, ..Default::default() };
            let fault = FaultPlan { worker: 1, from_round: 22, mode };
            let mut records = Vec::new();
            for r in 0..26u64 {
                let shifts: Vec<f64> = (0..4).map(|j| 0.01 * (1.0 + 0.02 * ((r + j) % 3) as f64)).collect();
                let mut ws = workers_around(&a, &shifts);
                records.push(merge_round(&mut a, &mut ws, &mut st, &cfg, Some(&fault)).unwrap());
            }
            (a, records)
        };
        let (corrupt, recs) = run(FaultMode::Corrupt { factor: 100.0 });
        let (loo, _) = run(FaultMode::Exclude);
        assert_eq!(corrupt, loo);
        for r in &recs[22..] {
            assert_eq!(r.excluded_workers, vec![1]);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut a = anchor();
        let mut st = MergeState::default();
        let cfg = EditConfig { outer_momentum: 0.5, ..Default::default() };
        let mut ws = workers_around(&a, &[0.01, 0.01]);
        merge_round(&mut a, &mut ws, &mut st, &cfg, None).unwrap();
        assert!(st.momentum.is_some());
    }
}
