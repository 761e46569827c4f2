//! Single-replica training loop shared by plain, synchronous and EDiT runs.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, TrainConfig};
use super::task::{gather_rows, gather_targets, generate_task, Dataset};
use crate::checkpoint::{state_digest, write_checkpoint};
use crate::cluster_sim::StepTimeModel;
use crate::edit_sync::{local_round, WorkerReplica};
use crate::error::{Error, Result};
use crate::moe::{load_summary, MoeModel};
use crate::numcore::{RngStream, StreamKind};
use crate::optimizer::{adamw_step, batch_size_at, clip_global_norm, AdamWState};
use crate::spike_guard::{PendingBatch, SpikeAction, SpikeEvent, SpikeGuard};

/// One-off gradient corruption: the first fresh batch of `worker` at local
/// step `step` has its loss and gradient multiplied by `scale`. The fault is
/// transient, so a later retry of the same batch is clean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poison {
    pub step: u64,
    pub worker: u32,
    pub scale: f64,
}

/// Everything a step needs besides the replica itself.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub dataset: &'a Dataset,
    pub train: &'a TrainConfig,
    pub seed: u64,
    /// Fresh batches consumed per step by all replicas together.
    pub stride: u64,
    /// Fresh batches consumed per step by one replica.
    pub batches_per_step: u64,
    pub poison: Option<Poison>,
    pub record_digests: bool,
    pub step_time: StepTimeModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub worker: u32,
    /// Total objective, including auxiliary losses.
    pub loss: f64,
    pub task_loss: f64,
    pub lr: f64,
    /// Learning rate actually applied; 0 when the step was skipped.
    pub applied_lr: f64,
    pub batch_size: usize,
    pub balance_loss: f64,
    pub z_loss: f64,
    pub expert_load_entropy: f64,
    pub spike_events: Vec<SpikeEvent>,
    pub sim_time: f64,
    pub eval_loss: Option<f64>,
    pub digest_before: Option<String>,
    pub digest_after: Option<String>,
}

/// Per-replica metrics buffer and simulated clock.
#[derive(Clone, Debug)]
pub struct WorkerSink {
    pub records: Vec<MetricsRecord>,
    pub clock: f64,
    clock_rng: RngStream,
    /// Step durations drawn ahead of time by a time-triggered round.
    pub pending_durations: VecDeque<f64>,
}

impl WorkerSink {
    pub fn new(seed: u64, worker: u32) -> Self {
        Self {
            records: Vec::new(),
            clock: 0.0,
            clock_rng: RngStream::named(seed, StreamKind::SimTime, worker),
            pending_durations: VecDeque::new(),
        }
    }

    pub fn draw_duration(&mut self, model: &StepTimeModel) -> f64 {
        let d = model.sample(&mut self.clock_rng);
        self.pending_durations.push_back(d);
        d
    }

    fn next_duration(&mut self, model: &StepTimeModel) -> f64 {
        match self.pending_durations.pop_front() {
            Some(d) => d,
            None => model.sample(&mut self.clock_rng),
        }
    }
}

/// Builds replica `worker`. All replicas share the initial parameters and
/// differ only in their routing-noise and retry streams.
pub fn init_worker(cfg: &ExperimentConfig, worker: u32, guard: bool) -> Result<WorkerReplica> {
    let model = MoeModel::new(
        cfg.model.clone(),
        cfg.train.router_warmup,
        &mut RngStream::named(cfg.seed, StreamKind::Init, 0),
    )?;
    let optimizer = AdamWState::new(cfg.train.optimizer, model.params().tensors());
    let guard = guard.then(|| SpikeGuard::new(cfg.spike.clone(), RngStream::named(cfg.seed, StreamKind::Retry, worker)));
    Ok(WorkerReplica::new(
        worker,
        model,
        optimizer,
        RngStream::named(cfg.seed, StreamKind::RoutingNoise, worker),
        guard,
    ))
}

/// Task loss on the held-out split with a fixed noise stream.
pub fn evaluate(model: &MoeModel, dataset: &Dataset, seed: u64) -> Result<f64> {
    let mut noise = RngStream::named(seed, StreamKind::RoutingNoise, u32::MAX);
    let cache = model.forward(&dataset.eval_inputs, &mut noise)?;
    Ok(dataset.eval_targets.loss(&cache.logits)?.0)
}

fn abort(step: u64, worker: &WorkerReplica, detail: impl std::fmt::Display) -> Error {
    Error::Aborted {
        step,
        detail: format!(
            "worker {}: {detail}; router step {}, params digest {}",
            worker.worker_id,
            worker.model.router.global_step,
            state_digest(worker.model.params(), Some(&worker.optimizer))
        ),
    }
}

/// One forward/backward/update iteration of `worker` on its next batches.
pub fn train_step(worker: &mut WorkerReplica, ctx: &StepContext, sink: &mut WorkerSink) -> Result<f64> {
    let t = worker.total_steps;
    let w = worker.worker_id;
    let lr = ctx.train.schedule.lr(t, ctx.train.steps);
    let fresh: Vec<PendingBatch<u64>> = (0..ctx.batches_per_step)
        .map(|j| PendingBatch { item: t * ctx.stride + w as u64 * ctx.batches_per_step + j, original_step: t, retries: 0 })
        .collect();
    let retries = worker.guard.as_mut().map(|g| g.take_retries()).unwrap_or_default();

    let mut rows = Vec::new();
    let mut poisoned = 0..0;
    for (i, b) in fresh.iter().chain(&retries).enumerate() {
        let size = batch_size_at(b.original_step, &ctx.train.batch_size);
        if i == 0 && ctx.poison.is_some_and(|p| p.step == t && p.worker == w) {
            poisoned = rows.len()..rows.len() + size;
        }
        rows.extend(ctx.dataset.batch_rows(ctx.seed, b.item, size)?);
    }
    let (h, targets) = ctx.dataset.rows(&rows)?;

    worker.model.router.observe_logits(&h.matmul(&worker.model.params().router)?);
    let cache = worker.model.forward(&h, &mut worker.noise)?;
    let (mut task, mut d_logits) = targets.loss(&cache.logits)?;
    if let (Some(p), false) = (ctx.poison, poisoned.is_empty()) {
        let idx: Vec<usize> = poisoned.clone().collect();
        let sub = gather_targets(&targets, &idx)?;
        let (lp, _) = sub.loss(&gather_rows(&cache.logits, &idx)?)?;
        task += (p.scale - 1.0) * lp * idx.len() as f64 / rows.len() as f64;
        for r in idx {
            d_logits.row_mut(r).iter_mut().for_each(|g| *g *= p.scale);
        }
    }
    let report = &cache.block.report;
    let loss = MoeModel::total_loss(task, report, ctx.train.aux);

    let digest_before = ctx.record_digests.then(|| state_digest(worker.model.params(), Some(&worker.optimizer)));
    let n_events = worker.guard.as_ref().map_or(0, |g| g.events.len());
    let applied = match worker.guard.as_mut() {
        Some(g) => {
            let verdict = g.judge(t, w, loss, !retries.is_empty(), lr);
            match verdict.lr {
                Some(a) if loss.is_finite() => Some(a),
                _ => {
                    g.requeue(fresh.into_iter().chain(retries));
                    None
                }
            }
        }
        None if !loss.is_finite() => return Err(abort(t, worker, format!("non-finite loss {loss}"))),
        None => Some(lr),
    };

    if let Some(step_lr) = applied {
        let mut grads = worker.model.backward(&cache, &d_logits, ctx.train.aux)?;
        if ctx.train.clip_norm > 0.0 {
            clip_global_norm(grads.params.tensors_mut(), ctx.train.clip_norm).map_err(|e| abort(t, worker, e))?;
        }
        adamw_step(worker.model.params_mut().tensors_mut(), grads.params.tensors(), &mut worker.optimizer, step_lr)
            .map_err(|e| abort(t, worker, e))?;
    }
    worker.model.router.global_step += 1;

    sink.clock += sink.next_duration(&ctx.step_time);
    let eval_due = ctx.train.eval_every > 0 && (t + 1) % ctx.train.eval_every == 0;
    let eval_loss = if eval_due { Some(evaluate(&worker.model, ctx.dataset, ctx.seed)?) } else { None };
    let spike_events = worker.guard.as_ref().map(|g| g.events[n_events..].to_vec()).unwrap_or_default();
    sink.records.push(MetricsRecord {
        step: t,
        worker: w,
        loss,
        task_loss: task,
        lr,
        applied_lr: applied.unwrap_or(0.0),
        batch_size: rows.len(),
        balance_loss: report.balance_loss,
        z_loss: report.z_loss,
        expert_load_entropy: load_summary(report.expert_load.clone()).entropy,
        spike_events,
        sim_time: sink.clock,
        eval_loss,
        digest_before,
        digest_after: ctx.record_digests.then(|| state_digest(worker.model.params(), Some(&worker.optimizer))),
    });
    Ok(loss)
}

/// Result of one replica trained for `train.steps` steps.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub worker: WorkerReplica,
    pub records: Vec<MetricsRecord>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

impl TrainOutcome {
    pub fn spike_events(&self) -> Vec<SpikeEvent> {
        self.worker.guard.as_ref().map(|g| g.events.clone()).unwrap_or_default()
    }

    /// Held-out loss after every step that evaluated.
    pub fn eval_curve(&self) -> Vec<(u64, f64)> {
        self.records.iter().filter_map(|r| r.eval_loss.map(|e| (r.step, e))).collect()
    }
}

/// Trains one replica consuming `batches_per_step` fresh batches per step.
/// With `batches_per_step = W` this is the synchronous data-parallel
/// baseline for `W` workers: one step on the concatenated global batch.
pub fn train_replica(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    batches_per_step: u64,
    guard: bool,
    poison: Option<Poison>,
    record_digests: bool,
) -> Result<TrainOutcome> {
    let mut worker = init_worker(cfg, 0, guard)?;
    let ctx = StepContext {
        dataset,
        train: &cfg.train,
        seed: cfg.seed,
        stride: batches_per_step,
        batches_per_step,
        poison,
        record_digests,
        step_time: cfg.sim.step_time,
    };
    let mut sink = WorkerSink::new(cfg.seed, 0);
    let initial_eval = evaluate(&worker.model, dataset, cfg.seed)?;
    if cfg.train.steps > 0 {
        local_round(&mut worker, cfg.train.steps, &mut sink, &|w: &mut WorkerReplica, s: &mut WorkerSink| {
            train_step(w, &ctx, s)
        })?;
    }
    let final_eval = evaluate(&worker.model, dataset, cfg.seed)?;
    Ok(TrainOutcome { worker, records: sink.records, initial_eval, final_eval })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub first_train_loss: Option<f64>,
    pub last_train_loss: Option<f64>,
    pub skipped_batches: usize,
    pub unconsumed_retries: Vec<u64>,
    pub checkpoint_sha256: String,
}

/// Writes metrics, spike log, final checkpoint and summary into `dir`.
pub fn write_training_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<TrainSummary> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("metrics.jsonl"), &outcome.records)?;
    write_jsonl(&dir.join("spikes.jsonl"), &outcome.spike_events())?;
    let w = &outcome.worker;
    let sidecar = write_checkpoint(dir, "final", &w.model, Some(&w.optimizer))?;
    let summary = TrainSummary {
        steps: w.total_steps,
        initial_eval_loss: outcome.initial_eval,
        final_eval_loss: outcome.final_eval,
        first_train_loss: w.loss_trace.first().copied(),
        last_train_loss: w.loss_trace.last().copied(),
        skipped_batches: w.guard.as_ref().map_or(0, |g| g.skipped()),
        unconsumed_retries: w.guard.as_ref().map(|g| g.unconsumed()).unwrap_or_default(),
        checkpoint_sha256: sidecar.sha256,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes the diagnostic dump for an aborted run.
pub fn write_abort_dump(dir: &Path, err: &Error) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let dump = serde_json::json!({ "error": err.kind(), "message": err.to_string() });
    write_json(&dir.join("abort.json"), &dump)
}

/// Single-worker training as configured, with outputs under `dir`.
pub fn run_training(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let dataset = generate_task(&cfg.task, &cfg.model, cfg.seed)?;
    match train_replica(cfg, &dataset, 1, cfg.train.spike_guard, None, false) {
        Ok(outcome) => write_training_outputs(dir, &outcome),
        Err(e) => {
            write_abort_dump(dir, &e)?;
            Err(e)
        }
    }
}

/// Counts actions of a given kind in a spike log.
pub fn count_actions(events: &[SpikeEvent], action: SpikeAction) -> usize {
    events.iter().filter(|e| e.action == action).count()
}

/// Trailing moving average with window `w` (first value at index `w − 1`).
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut acc: f64 = xs[..w].iter().sum();
    out.push(acc / w as f64);
    for i in w..xs.len() {
        acc += xs[i] - xs[i - w];
        out.push(acc / w as f64);
    }
    out
}
