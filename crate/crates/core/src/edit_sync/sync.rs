//! Synchronization triggers and the layer-by-layer sync schedule.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::moe::MoeParams;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyncPolicy {
    EveryHSteps { h: u64 },
    /// Trigger once `tau` simulated seconds have elapsed in the round.
    TimeThreshold { tau: f64 },
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SyncPolicy::EveryHSteps { h } if h == 0 => Err(invalid("H must be at least 1")),
            SyncPolicy::TimeThreshold { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(invalid(format!("tau must be positive, got {tau}")))
            }
            _ => Ok(()),
        }
    }
}

pub fn should_sync(policy: &SyncPolicy, local_steps: u64, elapsed: f64) -> bool {
    match *policy {
        SyncPolicy::EveryHSteps { h } => local_steps >= h,
        SyncPolicy::TimeThreshold { tau } => elapsed >= tau,
    }
}

/// Local steps a worker completes in one round, given a source of step
/// durations. Under a time threshold a worker starts a step only if it ends
/// by `tau` (but always runs at least one), then idles until the trigger.
/// Returns `(steps, busy_time)`.
pub fn steps_in_round(policy: &SyncPolicy, mut next_step_time: impl FnMut() -> f64) -> Result<(u64, f64)> {
    policy.validate()?;
    let (mut steps, mut busy) = (0u64, 0.0f64);
    while !should_sync(policy, steps, busy) {
        let t = next_step_time();
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!("step time must be positive, got {t}")));
        }
        if let SyncPolicy::TimeThreshold { tau } = *policy {
            if steps > 0 && busy + t > tau {
                break;
            }
        }
        busy += t;
        steps += 1;
    }
    Ok((steps, busy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub compute: f64,
    pub comm: f64,
}

/// Per-layer cost model: communication is `latency + params · comm_per_param`
/// and computation is `params · compute_per_param`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    pub latency: f64,
    pub comm_per_param: f64,
    pub compute_per_param: f64,
}

pub fn layer_costs(params: &MoeParams, model: &CommModel) -> Vec<LayerCost> {
    let tensors = params.tensors();
    params
        .layer_groups()
        .into_iter()
        .map(|(name, range)| {
            let n: usize = tensors[range].iter().map(|t| t.len()).sum();
            LayerCost {
                name,
                compute: n as f64 * model.compute_per_param,
                comm: model.latency + n as f64 * model.comm_per_param,
            }
        })
        .collect()
}

/// One stage of the schedule: optionally computing one layer while fetching
/// another's synchronized parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncStage {
    pub compute_layer: Option<usize>,
    pub comm_layer: Option<usize>,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncPlan {
    pub stages: Vec<SyncStage>,
    pub duration: f64,
}

impl SyncPlan {
    pub fn compute_time(&self, layers: &[LayerCost]) -> f64 {
        layers.iter().map(|l| l.compute).sum()
    }
}

/// Fetch layer 0, then compute layer ℓ while fetching layer ℓ+1, then
/// compute the last layer. Duration is
/// `comm_0 + Σ_{ℓ<L−1} max(compute_ℓ, comm_{ℓ+1}) + compute_{L−1}`.
pub fn layerwise_sync_plan(layers: &[LayerCost]) -> Result<SyncPlan> {
    if layers.is_empty() {
        return Err(invalid("sync plan needs at least one layer"));
    }
    for l in layers {
        if !(l.compute >= 0.0 && l.comm >= 0.0 && l.compute.is_finite() && l.comm.is_finite()) {
            return Err(invalid(format!("layer {} has invalid costs", l.name)));
        }
    }
    let n = layers.len();
    let mut stages = Vec::with_capacity(n + 1);
    let mut t = 0.0;
    let mut push = |compute: Option<usize>, comm: Option<usize>, len: f64, t: &mut f64| {
        stages.push(SyncStage { compute_layer: compute, comm_layer: comm, start: *t, end: *t + len });
        *t += len;
    };
    push(None, Some(0), layers[0].comm, &mut t);
    for l in 0..n - 1 {
        push(Some(l), Some(l + 1), layers[l].compute.max(layers[l + 1].comm), &mut t);
    }
    push(Some(n - 1), None, layers[n - 1].compute, &mut t);
    Ok(SyncPlan { stages, duration: t })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layers(compute: &[f64], comm: &[f64]) -> Vec<LayerCost> {
        compute
            .iter()
            .zip(comm)
            .enumerate()
            .map(|(i, (&c, &m))| LayerCost { name: format!("l{i}"), compute: c, comm: m })
            .collect()
    }

    #[test]
    fn three_layer_example() {
        let plan = layerwise_sync_plan(&layers(&[2.0, 2.0, 2.0], &[1.0, 3.0, 1.0])).unwrap();
        assert_eq!(plan.duration, 8.0);
        assert_eq!(plan.stages.len(), 4);
    }

    #[test]
    fn degenerate_cost_cases() {
        assert_eq!(layerwise_sync_plan(&layers(&[1.0, 2.0, 3.5], &[0.0; 3])).unwrap().duration, 6.5);
        assert_eq!(layerwise_sync_plan(&layers(&[0.0; 3], &[1.0, 2.0, 3.5])).unwrap().duration, 6.5);
        assert!(layerwise_sync_plan(&[]).is_err());
    }

    #[test]
    fn every_layer_fetched_and_computed_once() {
        let plan = layerwise_sync_plan(&layers(&[1.0; 5], &[2.0; 5])).unwrap();
        let mut comm: Vec<usize> = plan.stages.iter().filter_map(|s| s.comm_layer).collect();
        let mut comp: Vec<usize> = plan.stages.iter().filter_map(|s| s.compute_layer).collect();
        comm.sort();
        comp.sort();
        assert_eq!(comm, (0..5).collect::<Vec<_>>());
        assert_eq!(comp, (0..5).collect::<Vec<_>>());
        for w in plan.stages.windows(2) {
            assert_eq!(w[0].end, w[1].start);
        }
        // a layer is computed only after its parameters arrived
        for (i, s) in plan.stages.iter().enumerate() {
            if let Some(c) = s.compute_layer {
                let fetched = plan.stages.iter().position(|x| x.comm_layer == Some(c)).unwrap();
                assert!(fetched < i);
            }
        }
    }

    #[test]
    fn sync_triggers() {
        let p = SyncPolicy::EveryHSteps { h: 4 };
        assert!(!should_sync(&p, 3, 0.0));
        assert!(should_sync(&p, 4, 0.0));
        let p = SyncPolicy::TimeThreshold { tau: 10.0 };
        assert!(!should_sync(&p, 100, 9.99));
        assert!(should_sync(&p, 0, 10.0));
    }

    #[test]
    fn time_policy_step_counts() {
        let p = SyncPolicy::TimeThreshold { tau: 10.0 };
        assert_eq!(steps_in_round(&p, || 1.0).unwrap(), (10, 10.0));
        assert_eq!(steps_in_round(&p, || 2.0).unwrap(), (5, 10.0));
        assert_eq!(steps_in_round(&p, || 3.0).unwrap().0, 3);
        assert_eq!(steps_in_round(&p, || 25.0).unwrap(), (1, 25.0));
        let h = SyncPolicy::EveryHSteps { h: 4 };
        assert_eq!(steps_in_round(&h, || 7.0).unwrap(), (4, 28.0));
    }

    proptest! {
        #[test]
        fn duration_between_bounds(costs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..10)) {
            let ls: Vec<LayerCost> = costs.iter().enumerate()
                .map(|(i, &(c, m))| LayerCost { name: i.to_string(), compute: c, comm: m }).collect();
            let plan = layerwise_sync_plan(&ls).unwrap();
            let comp: f64 = costs.iter().map(|c| c.0).sum();
            let comm: f64 = costs.iter().map(|c| c.1).sum();
            prop_assert!(plan.duration >= comp.max(comm) - 1e-12);
            prop_assert!(plan.duration <= comp + comm + 1e-12);
        }
    }
}
