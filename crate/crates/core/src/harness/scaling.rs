//! Scaling-fit entry point, with a synthetic record generator for runs
//! without measured data.

use std::path::Path;

use super::config::ExperimentConfig;
use super::train::write_json;
use crate::error::Result;
use crate::numcore::{RngStream, StreamKind};
use crate::scaling_fit::{fit_report, read_records_file, Arch, Metric, RunRecord, ScalingReport};

/// Compute grid of the synthetic study, 1e18 to 1e22 FLOPs.
pub fn synthetic_grid() -> Vec<f64> {
    (0..17).map(|i| 10f64.powf(18.0 + 0.25 * i as f64)).collect()
}

/// Records following `B = 0.3·C^0.33`, `η = 60·C^−0.25` and
/// `L = 1.5 + 40·C^−0.1` for MoE, with the dense curve needing three times
/// the compute for every loss. Batch sizes and learning rates carry
/// log-normal noise of scale `noise`, losses additive Gaussian noise of
/// scale `loss_noise`.
pub fn synthetic_records(seed: u64, noise: f64, loss_noise: f64) -> Vec<RunRecord> {
    let mut rng = RngStream::named(seed, StreamKind::Task, 100);
    let moe_loss = |c: f64| 1.5 + 40.0 * c.powf(-0.1);
    let mut out = Vec::new();
    for (arch, sparsity) in [(Arch::Moe, 0.1), (Arch::Dense, 1.0)] {
        for c in synthetic_grid() {
            let values = [
                (Metric::BatchSize, 0.3 * c.powf(0.33)),
                (Metric::LearningRate, 60.0 * c.powf(-0.25)),
                (Metric::Loss, if arch == Arch::Moe { moe_loss(c) } else { moe_loss(c / 3.0) }),
            ];
            for (metric, v) in values {
                let value = match metric {
                    Metric::Loss => v + loss_noise * rng.normal(),
                    _ => v * (noise * rng.normal()).exp(),
                };
                out.push(RunRecord { compute_flops: c, metric, value, arch, sparsity });
            }
        }
    }
    out
}

pub fn write_records_csv(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Fits configured or synthetic records; writes `records.csv` and
/// `fit_report.json`.
pub fn run_scaling_fit(cfg: &ExperimentConfig, dir: &Path) -> Result<ScalingReport> {
    let records = match &cfg.scaling.records {
        Some(path) => read_records_file(Path::new(path))?,
        None => synthetic_records(cfg.seed, cfg.scaling.synthetic_noise, cfg.scaling.synthetic_loss_noise),
    };
    let report = fit_report(&records, cfg.scaling.accounting, &cfg.scaling.lever_at)?;
    std::fs::create_dir_all(dir)?;
    write_records_csv(&dir.join("records.csv"), &records)?;
    write_json(&dir.join("fit_report.json"), &report)?;
    Ok(report)
}
