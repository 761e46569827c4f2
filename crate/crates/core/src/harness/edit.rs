//! Multi-worker training: EDiT rounds and the synchronous baseline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::task::{generate_task, Dataset};
use super::train::{
    evaluate, init_worker, train_replica, train_step, write_abort_dump, write_json, write_jsonl, MetricsRecord,
    Poison, StepContext, TrainOutcome, WorkerSink,
};
use crate::checkpoint::write_checkpoint;
use crate::edit_sync::{merge_round, run_local_rounds, steps_in_round, FaultPlan, MergeState, RoundRecord, SyncPolicy, WorkerReplica};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct EditOutcome {
    pub workers: Vec<WorkerReplica>,
    pub rounds: Vec<RoundRecord>,
    /// Metrics of all workers, grouped by round and ordered by worker id.
    pub records: Vec<MetricsRecord>,
    pub initial_eval: f64,
    pub final_eval: f64,
}

impl EditOutcome {
    /// The synchronized model every worker holds after the last merge.
    pub fn anchor(&self) -> &WorkerReplica {
        &self.workers[0]
    }
}

/// EDiT training with `edit.n_workers` replicas. Every replica runs
/// `train.steps` local steps under a step-count policy; under a time
/// policy rounds continue until the workers together have run
/// `n_workers · train.steps` steps.
pub fn train_edit(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    fault: Option<&FaultPlan>,
    poison: Option<Poison>,
) -> Result<EditOutcome> {
    cfg.edit.validate()?;
    let n = cfg.edit.n_workers;
    let mut workers = (0..n).map(|w| init_worker(cfg, w, cfg.train.spike_guard)).collect::<Result<Vec<_>>>()?;
    let mut sinks: Vec<WorkerSink> = (0..n).map(|w| WorkerSink::new(cfg.seed, w)).collect();
    let mut anchor = workers[0].model.params().clone();
    let ctx = StepContext {
        dataset,
        train: &cfg.train,
        seed: cfg.seed,
        stride: n as u64,
        batches_per_step: 1,
        poison,
        record_digests: false,
        step_time: cfg.sim.step_time,
    };
    let models = cfg.sim.worker_models();
    let initial_eval = evaluate(&workers[0].model, dataset, cfg.seed)?;
    let mut state = MergeState::default();
    let mut rounds = Vec::new();
    let mut records = Vec::new();
    let budget = cfg.train.steps * n as u64;
    let step_fn = |w: &mut WorkerReplica, s: &mut WorkerSink| train_step(w, &ctx, s);

    loop {
        let done: u64 = workers.iter().map(|w| w.total_steps).sum();
        if done >= budget {
            break;
        }
        let steps: Vec<u64> = match cfg.edit.policy {
            SyncPolicy::EveryHSteps { h } => workers.iter().map(|w| h.min(cfg.train.steps - w.total_steps)).collect(),
            SyncPolicy::TimeThreshold { .. } => sinks
                .iter_mut()
                .zip(&models)
                .map(|(s, m)| {
                    s.pending_durations.clear();
                    let (k, _) = steps_in_round(&cfg.edit.policy, || s.draw_duration(m))?;
                    s.pending_durations.truncate(k as usize);
                    Ok(k)
                })
                .collect::<Result<_>>()?,
        };
        run_local_rounds(&mut workers, &mut sinks, &steps, cfg.edit.parallel, &step_fn)?;
        let mut record = merge_round(&mut anchor, &mut workers, &mut state, &cfg.edit, fault)?;
        record.anchor_loss = Some(evaluate(&workers[0].model, dataset, cfg.seed)?);
        rounds.push(record);
        for s in sinks.iter_mut() {
            records.append(&mut s.records);
        }
    }
    let final_eval = evaluate(&workers[0].model, dataset, cfg.seed)?;
    Ok(EditOutcome { workers, rounds, records, initial_eval, final_eval })
}

/// Synchronous data parallelism over `edit.n_workers` workers at the same
/// per-worker batch size and step count: each step trains on the
/// concatenation of all workers' batches.
pub fn train_sync_baseline(cfg: &ExperimentConfig, dataset: &Dataset, poison: Option<Poison>) -> Result<TrainOutcome> {
    train_replica(cfg, dataset, cfg.edit.n_workers as u64, cfg.train.spike_guard, poison, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub n_workers: u32,
    pub rounds: usize,
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub baseline_final_eval_loss: f64,
    /// `(edit − baseline) / baseline` of the final held-out loss.
    pub relative_gap: f64,
    pub excluded_worker_rounds: usize,
    pub checkpoint_sha256: String,
}

/// EDiT training plus the synchronous baseline, with outputs under `dir`.
pub fn run_edit_training(cfg: &ExperimentConfig, dir: &Path, fault: Option<&FaultPlan>) -> Result<EditSummary> {
    cfg.validate()?;
    let dataset = generate_task(&cfg.task, &cfg.model, cfg.seed)?;
    let (edit, baseline) = match train_edit(cfg, &dataset, fault, None)
        .and_then(|e| train_sync_baseline(cfg, &dataset, None).map(|b| (e, b)))
    {
        Ok(pair) => pair,
        Err(e) => {
            write_abort_dump(dir, &e)?;
            return Err(e);
        }
    };
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("metrics.jsonl"), &edit.records)?;
    write_jsonl(&dir.join("rounds.jsonl"), &edit.rounds)?;
    write_jsonl(&dir.join("baseline_metrics.jsonl"), &baseline.records)?;
    let events: Vec<_> = edit.workers.iter().filter_map(|w| w.guard.as_ref()).flat_map(|g| g.events.clone()).collect();
    write_jsonl(&dir.join("spikes.jsonl"), &events)?;
    let anchor = edit.anchor();
    let sidecar = write_checkpoint(dir, "anchor", &anchor.model, None)?;
    let summary = EditSummary {
        n_workers: cfg.edit.n_workers,
        rounds: edit.rounds.len(),
        initial_eval_loss: edit.initial_eval,
        final_eval_loss: edit.final_eval,
        baseline_final_eval_loss: baseline.final_eval,
        relative_gap: (edit.final_eval - baseline.final_eval) / baseline.final_eval,
        excluded_worker_rounds: edit.rounds.iter().map(|r| r.excluded_workers.len()).sum(),
        checkpoint_sha256: sidecar.sha256,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit_sync::FaultMode;
    use crate::harness::config::TaskSpec;

    fn small(steps: u64, workers: u32, h: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task = TaskSpec { n_train: 512, n_eval: 64, ..TaskSpec::default() };
        cfg.train.steps = steps;
        cfg.train.eval_every = 0;
        cfg.edit.n_workers = workers;
        cfg.edit.policy = SyncPolicy::EveryHSteps { h };
        cfg
    }

    #[test]
    fn single_worker_every_step_matches_plain_training() {
        let mut cfg = small(20, 1, 1);
        cfg.edit.penalty.enabled = false;
        let data = generate_task(&cfg.task, &cfg.model, cfg.seed).unwrap();
        let edit = train_edit(&cfg, &data, None, None).unwrap();
        let plain = train_replica(&cfg, &data, 1, cfg.train.spike_guard, None, false).unwrap();
        assert_eq!(edit.anchor().model.params(), plain.worker.model.params());
        assert_eq!(edit.records, plain.records);
    }

    #[test]
    fn parallel_rounds_are_bit_identical() {
        let mut cfg = small(12, 3, 4);
        let data = generate_task(&cfg.task, &cfg.model, cfg.seed).unwrap();
        let a = train_edit(&cfg, &data, None, None).unwrap();
        cfg.edit.parallel = true;
        let b = train_edit(&cfg, &data, None, None).unwrap();
        assert_eq!(a.anchor().model.params(), b.anchor().model.params());
        assert_eq!(a.rounds, b.rounds);
        assert_eq!(a.records, b.records);
        assert_eq!(a.rounds.len(), 3);
    }

    #[test]
    fn time_policy_meets_sample_budget() {
        let mut cfg = small(10, 3, 1);
        cfg.edit.policy = SyncPolicy::TimeThreshold { tau: 3.0 };
        cfg.sim.step_time.straggle_probability = 0.5;
        let data = generate_task(&cfg.task, &cfg.model, cfg.seed).unwrap();
        let out = train_edit(&cfg, &data, None, None).unwrap();
        let total: u64 = out.workers.iter().map(|w| w.total_steps).sum();
        assert!(total >= 30);
        assert!(out.rounds.iter().all(|r| r.local_steps.values().all(|&s| (1..=3).contains(&s))));
    }

    #[test]
    fn excluded_worker_never_merges() {
        let cfg = small(8, 3, 2);
        let data = generate_task(&cfg.task, &cfg.model, cfg.seed).unwrap();
        let fault = FaultPlan { worker: 1, from_round: 0, mode: FaultMode::Exclude };
        let out = train_edit(&cfg, &data, Some(&fault), None).unwrap();
        assert!(out.rounds.iter().all(|r| r.excluded_workers.contains(&1) && !r.included_workers.contains(&1)));
    }
}
