//! Discrete-time throughput simulation of synchronous and elastic training.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::edit_sync::{layerwise_sync_plan, steps_in_round, LayerCost, SyncPolicy};
use crate::error::{invalid, Result};
use crate::numcore::{RngStream, StreamKind};

/// Step duration `base · slowdown`, multiplied by `straggle_multiplier` with
/// probability `straggle_probability`. Each sample consumes one uniform draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepTimeModel {
    pub base_step_time: f64,
    pub straggle_probability: f64,
    pub straggle_multiplier: f64,
    /// Fixed per-worker slowdown factor.
    pub slowdown: f64,
}

impl Default for StepTimeModel {
    fn default() -> Self {
        Self { base_step_time: 1.0, straggle_probability: 0.0, straggle_multiplier: 1.0, slowdown: 1.0 }
    }
}

impl StepTimeModel {
    pub fn deterministic(t: f64) -> Self {
        Self { base_step_time: t, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_step_time > 0.0 && self.base_step_time.is_finite()) {
            return Err(invalid(format!("base_step_time must be positive, got {}", self.base_step_time)));
        }
        if !(0.0..=1.0).contains(&self.straggle_probability) {
            return Err(invalid(format!("straggle_probability {} outside [0, 1]", self.straggle_probability)));
        }
        if !(self.straggle_multiplier >= 1.0 && self.slowdown >= 1.0) {
            return Err(invalid("straggle_multiplier and slowdown must be at least 1"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let t = self.base_step_time * self.slowdown;
        if rng.uniform() < self.straggle_probability {
            t * self.straggle_multiplier
        } else {
            t
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Compute,
    Comm,
    Merge,
    Idle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub worker: u32,
    pub kind: EventKind,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub n_workers: u32,
    pub events: Vec<SimEvent>,
    pub total_time: f64,
    /// Steps per simulated second.
    pub throughput: f64,
}

impl SimTrace {
    fn new(n_workers: u32) -> Self {
        Self { n_workers, events: Vec::new(), total_time: 0.0, throughput: 0.0 }
    }

    fn push(&mut self, worker: u32, kind: EventKind, start: f64, end: f64) {
        if end > start {
            self.events.push(SimEvent { worker, kind, start, end });
        }
    }

    /// Every worker's events tile `[0, total_time]` without gaps or overlap.
    pub fn check_consistency(&self) -> Result<()> {
        for w in 0..self.n_workers {
            let mut t = 0.0;
            for e in self.events.iter().filter(|e| e.worker == w) {
                if e.start != t || e.end < e.start {
                    return Err(invalid(format!("worker {w}: event at {} does not continue from {t}", e.start)));
                }
                t = e.end;
            }
            if t != self.total_time {
                return Err(invalid(format!("worker {w}: timeline ends at {t}, trace at {}", self.total_time)));
            }
        }
        Ok(())
    }

    /// Busy and idle seconds per worker.
    pub fn time_by_kind(&self, worker: u32, kind: EventKind) -> f64 {
        self.events.iter().filter(|e| e.worker == worker && e.kind == kind).map(|e| e.end - e.start).sum()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["worker", "kind", "start", "end"])?;
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Compute => "compute",
                EventKind::Comm => "comm",
                EventKind::Merge => "merge",
                EventKind::Idle => "idle",
            };
            w.write_record([e.worker.to_string(), kind.to_string(), e.start.to_string(), e.end.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_models(models: &[StepTimeModel]) -> Result<()> {
    if models.is_empty() {
        return Err(invalid("at least one worker required"));
    }
    models.iter().try_for_each(StepTimeModel::validate)
}

fn worker_streams(seed: u64, n: usize) -> Vec<RngStream> {
    (0..n).map(|w| RngStream::named(seed, StreamKind::SimTime, w as u32)).collect()
}

/// All-reduce style training: each global step lasts as long as the slowest
/// worker plus `comm_time`.
pub fn simulate_sync_baseline(models: &[StepTimeModel], comm_time: f64, total_steps: u64, seed: u64) -> Result<SimTrace> {
    check_models(models)?;
    if !(comm_time >= 0.0) || total_steps == 0 {
        return Err(invalid("comm time must be non-negative and total_steps positive"));
    }
    let mut rngs = worker_streams(seed, models.len());
    let mut trace = SimTrace::new(models.len() as u32);
    let mut t = 0.0;
    let mut times = vec![0.0; models.len()];
    for _ in 0..total_steps {
        for (w, m) in models.iter().enumerate() {
            times[w] = m.sample(&mut rngs[w]);
        }
        let slowest = times.iter().copied().fold(0.0, f64::max);
        let compute_end = t + slowest;
        let step_end = compute_end + comm_time;
        for (w, &tw) in times.iter().enumerate() {
            trace.push(w as u32, EventKind::Compute, t, t + tw);
            trace.push(w as u32, EventKind::Idle, t + tw, compute_end);
            trace.push(w as u32, EventKind::Comm, compute_end, step_end);
        }
        t = step_end;
    }
    trace.total_time = t;
    trace.throughput = total_steps as f64 / t;
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSimResult {
    pub trace: SimTrace,
    /// Local steps per worker per unit time, averaged over workers, so that
    /// it is comparable with the baseline's global steps per second.
    pub throughput: f64,
    pub local_steps: Vec<u64>,
    pub rounds: u64,
}

/// Merge overhead of a layer-wise synchronized round beyond the layers'
/// own computation.
pub fn merge_overhead(layers: &[LayerCost]) -> Result<f64> {
    let plan = layerwise_sync_plan(layers)?;
    Ok((plan.duration - plan.compute_time(layers)).max(0.0))
}

/// Elastic training: workers run local steps until the policy triggers, wait
/// for the slowest (or for τ), then spend `merge_time` synchronizing.
pub fn simulate_edit(
    models: &[StepTimeModel],
    policy: &SyncPolicy,
    merge_time: f64,
    total_rounds: u64,
    seed: u64,
) -> Result<EditSimResult> {
    check_models(models)?;
    policy.validate()?;
    if !(merge_time >= 0.0) || total_rounds == 0 {
        return Err(invalid("merge time must be non-negative and total_rounds positive"));
    }
    let n = models.len();
    let mut rngs = worker_streams(seed, n);
    let mut trace = SimTrace::new(n as u32);
    let mut local_steps = vec![0u64; n];
    let mut t = 0.0;
    let mut durations: Vec<Vec<f64>> = vec![Vec::new(); n];
    for _ in 0..total_rounds {
        let mut busy_max: f64 = 0.0;
        for w in 0..n {
            let mut drawn = Vec::new();
            let (steps, busy) = steps_in_round(policy, || {
                let x = models[w].sample(&mut rngs[w]);
                drawn.push(x);
                x
            })?;
            drawn.truncate(steps as usize);
            durations[w] = drawn;
            local_steps[w] += steps;
            busy_max = busy_max.max(busy);
        }
        let span = match *policy {
            SyncPolicy::TimeThreshold { tau } => busy_max.max(tau),
            SyncPolicy::EveryHSteps { .. } => busy_max,
        };
        let round_end = t + span;
        let merge_end = round_end + merge_time;
        for (w, ds) in durations.iter().enumerate() {
            let mut s = t;
            for &d in ds {
                trace.push(w as u32, EventKind::Compute, s, s + d);
                s += d;
            }
            trace.push(w as u32, EventKind::Idle, s, round_end);
            trace.push(w as u32, EventKind::Merge, round_end, merge_end);
        }
        t = merge_end;
    }
    trace.total_time = t;
    let total: u64 = local_steps.iter().sum();
    let throughput = total as f64 / n as f64 / t;
    trace.throughput = throughput;
    Ok(EditSimResult { trace, throughput, local_steps, rounds: total_rounds })
}

/// `(edit − baseline) / baseline × 100`.
pub fn speedup_ratio(edit_throughput: f64, baseline_throughput: f64) -> Result<f64> {
    if !(baseline_throughput > 0.0) || !edit_throughput.is_finite() {
        return Err(invalid("baseline throughput must be positive"));
    }
    Ok((edit_throughput - baseline_throughput) / baseline_throughput * 100.0)
}
