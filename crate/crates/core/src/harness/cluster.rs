//! Cluster-simulation and cost entry points.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, SimConfig};
use super::train::write_json;
use crate::cluster_sim::{
    compare_cost, estimate_cost, merge_overhead, resolve_device, simulate_edit, simulate_sync_baseline, speedup_ratio,
    EditSimResult, SimTrace, StepTimeModel,
};
use crate::edit_sync::layer_costs;
use crate::error::{invalid, Result};
use crate::moe::MoeParams;
use crate::numcore::RngStream;

/// Synchronization overhead of one merge for the configured model, paid
/// per round by EDiT and per step by the synchronous baseline.
pub fn sync_overhead(cfg: &ExperimentConfig) -> Result<f64> {
    let params = MoeParams::init(&cfg.model, &mut RngStream::new(0, 0))?;
    merge_overhead(&layer_costs(&params, &cfg.sim.comm))
}

pub fn simulate_pair(sim: &SimConfig, models: &[StepTimeModel], overhead: f64, seed: u64) -> Result<(SimTrace, EditSimResult)> {
    let baseline = simulate_sync_baseline(models, overhead, sim.baseline_steps, seed)?;
    let edit = simulate_edit(models, &sim.policy, overhead, sim.edit_rounds, seed)?;
    Ok((baseline, edit))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub straggle_multiplier: f64,
    pub median_speedup: f64,
    pub speedups: Vec<f64>,
}

/// Median EDiT speed-up over seeds `0..sim.seeds` for each straggle
/// multiplier in `sim.sweep`.
pub fn straggler_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    if cfg.sim.seeds == 0 {
        return Err(invalid("sweep needs at least one seed"));
    }
    let overhead = sync_overhead(cfg)?;
    cfg.sim
        .sweep
        .iter()
        .map(|&m| {
            let mut sim = cfg.sim.clone();
            sim.step_time.straggle_multiplier = m;
            let models = sim.worker_models();
            let speedups = (0..sim.seeds)
                .map(|s| {
                    let (b, e) = simulate_pair(&sim, &models, overhead, cfg.seed.wrapping_add(s))?;
                    speedup_ratio(e.throughput, b.throughput)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint { straggle_multiplier: m, median_speedup: median(speedups.clone()), speedups })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub baseline: f64,
    pub edit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub device: String,
    pub devices: u32,
    /// Steps priced: `sim.baseline_steps` at each method's throughput.
    pub steps: u64,
    pub baseline_rmb: f64,
    pub edit_rmb: f64,
    pub savings_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub throughput: Throughput,
    pub speedup: f64,
    pub cost: Cost,
    pub sync_overhead: f64,
    pub sweep: Vec<SweepPoint>,
}

/// Simulates the configured cluster, prices both methods with the first
/// cost scenario's device and runs the straggler sweep. Traces go to
/// `trace_baseline.csv` and `trace_edit.csv`.
pub fn run_cluster_simulation(cfg: &ExperimentConfig, dir: &Path) -> Result<SimSummary> {
    cfg.validate()?;
    let overhead = sync_overhead(cfg)?;
    let models = cfg.sim.worker_models();
    let (baseline, edit) = simulate_pair(&cfg.sim, &models, overhead, cfg.seed)?;
    baseline.check_consistency()?;
    edit.trace.check_consistency()?;
    let device = resolve_device(&cfg.cost.a.device, &cfg.cost.devices)?;
    let steps = cfg.sim.baseline_steps;
    let price = |throughput: f64| estimate_cost(&device, cfg.sim.n_workers as u64, steps as f64 / throughput / 3600.0);
    let (baseline_rmb, edit_rmb) = (price(baseline.throughput)?, price(edit.throughput)?);
    let summary = SimSummary {
        throughput: Throughput { baseline: baseline.throughput, edit: edit.throughput },
        speedup: speedup_ratio(edit.throughput, baseline.throughput)?,
        cost: Cost {
            device: device.name.clone(),
            devices: cfg.sim.n_workers,
            steps,
            baseline_rmb,
            edit_rmb,
            savings_percent: compare_cost(baseline_rmb, edit_rmb)?,
        },
        sync_overhead: overhead,
        sweep: straggler_sweep(cfg)?,
    };
    std::fs::create_dir_all(dir)?;
    baseline.write_csv(std::fs::File::create(dir.join("trace_baseline.csv"))?)?;
    edit.trace.write_csv(std::fs::File::create(dir.join("trace_edit.csv"))?)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioCost {
    pub device: String,
    pub device_count: u64,
    pub hours: f64,
    pub cost_per_hour_rmb: f64,
    pub total_rmb: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub a: ScenarioCost,
    pub b: ScenarioCost,
    /// `(a − b) / a × 100`.
    pub savings_percent: f64,
}

pub fn cost_report(cfg: &ExperimentConfig) -> Result<CostReport> {
    let price = |s: &crate::cluster_sim::CostScenario| -> Result<ScenarioCost> {
        let dev = resolve_device(&s.device, &cfg.cost.devices)?;
        let hours = s.hours()?;
        Ok(ScenarioCost {
            device: dev.name.clone(),
            device_count: s.device_count,
            hours,
            cost_per_hour_rmb: dev.cost_per_hour_rmb,
            total_rmb: estimate_cost(&dev, s.device_count, hours)?,
        })
    };
    let (a, b) = (price(&cfg.cost.a)?, price(&cfg.cost.b)?);
    let savings_percent = compare_cost(a.total_rmb, b.total_rmb)?;
    Ok(CostReport { a, b, savings_percent })
}

pub fn run_cost(cfg: &ExperimentConfig, dir: &Path) -> Result<CostReport> {
    let report = cost_report(cfg)?;
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("cost.json"), &report)?;
    Ok(report)
}
