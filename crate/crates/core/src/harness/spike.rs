//! Poisoned-batch scenario: clean, unguarded and guarded runs side by side.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::task::generate_task;
use super::train::{train_replica, write_json, write_jsonl, Poison, TrainOutcome};
use crate::error::{invalid, Result};
use crate::spike_guard::{SpikeAction, SpikeClass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeReport {
    pub injection_step: u64,
    pub scale: f64,
    pub clean_final_loss: f64,
    pub unguarded_final_loss: f64,
    pub guarded_final_loss: f64,
    /// `max_{t ≥ s} (eval_run(t) − eval_clean(t))` over held-out losses.
    pub unguarded_excursion: f64,
    pub guarded_excursion: f64,
    /// `|guarded − clean| / clean` of the final held-out loss.
    pub guarded_final_gap: f64,
    pub wide_skip_events: usize,
    pub skip_steps: Vec<u64>,
    /// Every skipped step left parameters and optimizer moments untouched.
    pub skip_digests_identical: bool,
}

pub struct SpikeRuns {
    pub clean: TrainOutcome,
    pub unguarded: TrainOutcome,
    pub guarded: TrainOutcome,
}

/// Largest post-injection gap between a run's and the clean run's
/// held-out loss.
pub fn excursion(run: &TrainOutcome, clean: &TrainOutcome, from_step: u64) -> f64 {
    run.eval_curve()
        .iter()
        .zip(clean.eval_curve())
        .filter(|((s, _), _)| *s >= from_step)
        .map(|((_, a), (_, b))| a - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs the three variants with held-out evaluation after every step.
pub fn spike_scenario(cfg: &ExperimentConfig) -> Result<(SpikeReport, SpikeRuns)> {
    cfg.validate()?;
    if cfg.injection.step >= cfg.train.steps {
        return Err(invalid(format!("injection step {} beyond {} steps", cfg.injection.step, cfg.train.steps)));
    }
    let mut cfg = cfg.clone();
    cfg.train.eval_every = 1;
    let dataset = generate_task(&cfg.task, &cfg.model, cfg.seed)?;
    let poison = Poison { step: cfg.injection.step, worker: 0, scale: cfg.injection.scale };
    let clean = train_replica(&cfg, &dataset, 1, false, None, false)?;
    let unguarded = train_replica(&cfg, &dataset, 1, false, Some(poison), false)?;
    let guarded = train_replica(&cfg, &dataset, 1, true, Some(poison), true)?;

    let events = guarded.spike_events();
    let skip_steps: Vec<u64> = events.iter().filter(|e| e.action == SpikeAction::SkipAndRetry).map(|e| e.step).collect();
    let skip_digests_identical = skip_steps.iter().all(|&s| {
        let r = &guarded.records[s as usize];
        r.digest_before.is_some() && r.digest_before == r.digest_after
    });
    let s = cfg.injection.step;
    let report = SpikeReport {
        injection_step: s,
        scale: cfg.injection.scale,
        clean_final_loss: clean.final_eval,
        unguarded_final_loss: unguarded.final_eval,
        guarded_final_loss: guarded.final_eval,
        unguarded_excursion: excursion(&unguarded, &clean, s),
        guarded_excursion: excursion(&guarded, &clean, s),
        guarded_final_gap: (guarded.final_eval - clean.final_eval).abs() / clean.final_eval,
        wide_skip_events: events
            .iter()
            .filter(|e| e.classification == SpikeClass::WideSpike && e.action == SpikeAction::SkipAndRetry)
            .count(),
        skip_steps,
        skip_digests_identical,
    };
    Ok((report, SpikeRuns { clean, unguarded, guarded }))
}

/// Spike scenario with per-variant metrics, the guarded spike log and the
/// report written under `dir`.
pub fn run_spike_scenario(cfg: &ExperimentConfig, dir: &Path) -> Result<SpikeReport> {
    let (report, runs) = spike_scenario(cfg)?;
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("metrics_clean.jsonl"), &runs.clean.records)?;
    write_jsonl(&dir.join("metrics_unguarded.jsonl"), &runs.unguarded.records)?;
    write_jsonl(&dir.join("metrics_guarded.jsonl"), &runs.guarded.records)?;
    write_jsonl(&dir.join("spikes.jsonl"), &runs.guarded.spike_events())?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}
