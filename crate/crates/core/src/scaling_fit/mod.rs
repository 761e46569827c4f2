//! Power-law fits of optimal hyper-parameters and loss against compute, and
//! the compute-efficiency lever between two loss curves.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BatchSize,
    LearningRate,
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Moe,
    Dense,
}

/// How MoE compute budgets are counted. Records store activated FLOPs;
/// `Total` rescales MoE budgets by `1 / sparsity`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsAccounting {
    #[default]
    Activated,
    Total,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub compute_flops: f64,
    pub metric: Metric,
    pub value: f64,
    pub arch: Arch,
    /// Activated over total parameters (1 for dense).
    pub sparsity: f64,
}

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if !(self.compute_flops > 0.0 && self.value > 0.0 && self.compute_flops.is_finite() && self.value.is_finite()) {
            return Err(invalid(format!("record needs positive compute and value: {self:?}")));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(invalid(format!("sparsity {} outside (0, 1]", self.sparsity)));
        }
        Ok(())
    }

    pub fn compute(&self, accounting: FlopsAccounting) -> f64 {
        match (accounting, self.arch) {
            (FlopsAccounting::Total, Arch::Moe) => self.compute_flops / self.sparsity,
            _ => self.compute_flops,
        }
    }
}

/// Reads records from CSV with columns
/// `compute_flops,metric,value,arch,sparsity`.
pub fn read_records<R: Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let rec: RunRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<RunRecord>> {
    read_records(std::fs::File::open(path)?)
}

/// `(C, value)` pairs for one metric and architecture.
pub fn select(records: &[RunRecord], metric: Metric, arch: Arch, accounting: FlopsAccounting) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter(|r| r.metric == metric && r.arch == arch)
        .map(|r| (r.compute(accounting), r.value))
        .collect()
}

/// `y = a · C^b`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    /// Root-mean-square residual of `ln y`.
    pub residual_rms: f64,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.a * c.powf(self.b)
    }
}

fn check_points(points: &[(f64, f64)], min: usize) -> Result<()> {
    if points.len() < min {
        return Err(invalid(format!("need at least {min} points, got {}", points.len())));
    }
    if points.iter().any(|&(c, y)| !(c > 0.0 && y > 0.0 && c.is_finite() && y.is_finite())) {
        return Err(invalid("compute and values must be positive and finite"));
    }
    let mut cs: Vec<f64> = points.iter().map(|p| p.0).collect();
    cs.sort_by(f64::total_cmp);
    if cs.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("compute values must be distinct"));
    }
    Ok(())
}

/// Ordinary least squares of `ln y` on `ln C`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    check_points(points, 3)?;
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let ln_a = my - b * mx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - ln_a - b * x).powi(2)).sum();
    Ok(PowerLawFit { a: ln_a.exp(), b, residual_rms: (sse / n).sqrt() })
}

/// `L(C) = l0 + a · C^b` with `a > 0`, `b < 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurveFit {
    pub l0: f64,
    pub a: f64,
    pub b: f64,
    pub domain: (f64, f64),
    pub residual_rms: f64,
}

impl LossCurveFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.l0 + self.a * c.powf(self.b)
    }
}

/// Bounds and resolution of the exponent search.
pub const EXPONENT_RANGE: (f64, f64) = (-3.0, -1e-4);
const GRID_POINTS: usize = 241;

/// For fixed `b`, the linear least-squares `(l0, a')` of `L ≈ l0 + a'·x` with
/// `x = (C/C_g)^b`, and the residual sum of squares.
fn projected(points: &[(f64, f64)], cg: f64, b: f64) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(c, _)| (c / cg).powf(b)).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0 && sxx.is_finite()) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let l0 = my - slope * mx;
    let sse = xs.iter().zip(points).map(|(x, p)| (p.1 - l0 - slope * x).powi(2)).sum();
    Some((l0, slope, sse))
}

/// Variable-projection least squares: the objective is minimized over `b`
/// on a fixed log-spaced grid, refined by golden-section search around the
/// best grid point.
pub fn fit_loss_curve(points: &[(f64, f64)]) -> Result<LossCurveFit> {
    check_points(points, 4)?;
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(0.0, f64::max);
    if hi / lo < 100.0 {
        return Err(invalid("loss-curve fit needs compute spanning at least two decades"));
    }
    let cg = (points.iter().map(|p| p.0.ln()).sum::<f64>() / points.len() as f64).exp();
    let sse = |b: f64| projected(points, cg, b).map_or(f64::INFINITY, |r| r.2);

    let (bmin, bmax) = (EXPONENT_RANGE.0.abs().ln(), EXPONENT_RANGE.1.abs().ln());
    let grid: Vec<f64> =
        (0..GRID_POINTS).map(|i| -(bmin + (bmax - bmin) * i as f64 / (GRID_POINTS - 1) as f64).exp()).collect();
    let values: Vec<f64> = grid.iter().map(|&b| sse(b)).collect();
    let best = (0..grid.len()).min_by(|&i, &j| values[i].total_cmp(&values[j])).expect("non-empty grid");
    if best == 0 || best == grid.len() - 1 || !values[best].is_finite() {
        return Err(Error::Fit(format!(
            "exponent not identified: best grid b = {:.6e} at the search boundary, sse = {:.6e}",
            grid[best], values[best]
        )));
    }

    // golden-section on [grid[best-1], grid[best+1]]
    let (mut x0, mut x3) = (grid[best - 1], grid[best + 1]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = x3 - g * (x3 - x0);
    let mut x2 = x0 + g * (x3 - x0);
    let (mut f1, mut f2) = (sse(x1), sse(x2));
    for _ in 0..200 {
        if (x3 - x0).abs() <= 1e-14 * x0.abs() {
            break;
        }
        if f1 <= f2 {
            x3 = x2;
            x2 = x1;
            f2 = f1;
            x1 = x3 - g * (x3 - x0);
            f1 = sse(x1);
        } else {
            x0 = x1;
            x1 = x2;
            f1 = f2;
            x2 = x0 + g * (x3 - x0);
            f2 = sse(x2);
        }
    }
    let b = if f1 <= f2 { x1 } else { x2 };
    let (l0, slope, sse_b) = projected(points, cg, b).ok_or_else(|| Error::Fit("degenerate design at optimum".into()))?;
    let a = slope * cg.powf(-b);
    if !(a > 0.0 && a.is_finite() && l0.is_finite()) {
        return Err(Error::Fit(format!("fitted curve is not decreasing: l0 = {l0:.6e}, a = {a:.6e}, b = {b:.6e}")));
    }
    Ok(LossCurveFit { l0, a, b, domain: (lo, hi), residual_rms: (sse_b / points.len() as f64).sqrt() })
}

/// Relative tolerance of the compute inversion.
pub const INVERSION_TOLERANCE: f64 = 1e-10;

/// Compute at which `fit` reaches `target`, by bisection on `ln C`. The
/// bracket starts at the fit domain and widens geometrically.
pub fn invert_loss(fit: &LossCurveFit, target: f64) -> Result<f64> {
    if !(target > fit.l0) || !target.is_finite() {
        return Err(Error::Range(format!("target loss {target} not above asymptote {}", fit.l0)));
    }
    let (mut lo, mut hi) = (fit.domain.0.ln(), fit.domain.1.ln());
    let f = |lc: f64| fit.predict(lc.exp()) - target;
    let mut widen = 0;
    while !(f(lo) >= 0.0 && f(hi) <= 0.0) {
        let span = (hi - lo).max(1.0);
        if f(lo) < 0.0 {
            lo -= span;
        }
        if f(hi) > 0.0 {
            hi += span;
        }
        widen += 1;
        if widen > 60 || lo < -700.0 || hi > 700.0 {
            return Err(Error::Range(format!("target loss {target} cannot be bracketed")));
        }
    }
    while hi - lo > INVERSION_TOLERANCE * 0.5 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).exp())
}

/// `C_dense / C` where the dense curve reaches the MoE loss at `C`.
pub fn efficiency_lever(moe: &LossCurveFit, dense: &LossCurveFit, c: f64) -> Result<f64> {
    if !(c > 0.0 && c.is_finite()) {
        return Err(invalid("compute must be positive"));
    }
    let target = moe.predict(c);
    if dense.predict(c) == target {
        return Ok(1.0);
    }
    Ok(invert_loss(dense, target)? / c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchFits {
    pub arch: Arch,
    pub batch_size: Option<PowerLawFit>,
    pub learning_rate: Option<PowerLawFit>,
    pub loss: Option<LossCurveFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeverPoint {
    pub compute_flops: f64,
    pub lever: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub accounting: FlopsAccounting,
    pub fits: Vec<ArchFits>,
    pub lever: Vec<LeverPoint>,
}

/// Fits every metric with enough points for each architecture, and the
/// lever at `lever_at` when both loss curves exist.
pub fn fit_report(records: &[RunRecord], accounting: FlopsAccounting, lever_at: &[f64]) -> Result<ScalingReport> {
    records.iter().try_for_each(RunRecord::validate)?;
    let mut fits = Vec::new();
    for arch in [Arch::Moe, Arch::Dense] {
        let pl = |m| {
            let pts = select(records, m, arch, accounting);
            if pts.is_empty() { Ok(None) } else { fit_power_law(&pts).map(Some) }
        };
        let loss_pts = select(records, Metric::Loss, arch, accounting);
        let loss = if loss_pts.is_empty() { None } else { Some(fit_loss_curve(&loss_pts)?) };
        let f = ArchFits { arch, batch_size: pl(Metric::BatchSize)?, learning_rate: pl(Metric::LearningRate)?, loss };
        if f.batch_size.is_some() || f.learning_rate.is_some() || f.loss.is_some() {
            fits.push(f);
        }
    }
    let curve = |a| fits.iter().find(|f| f.arch == a).and_then(|f| f.loss);
    let lever = match (curve(Arch::Moe), curve(Arch::Dense)) {
        (Some(m), Some(d)) => lever_at
            .iter()
            .map(|&c| efficiency_lever(&m, &d, c).map(|lever| LeverPoint { compute_flops: c, lever }))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok(ScalingReport { accounting, fits, lever })
}
