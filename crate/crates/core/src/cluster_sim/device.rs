//! Accelerator profiles and cost accounting.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub peak_flops_t: f64,
    pub memory_gb: f64,
    pub cost_per_hour_rmb: f64,
    pub supports_fp8: bool,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("peak_flops_t", self.peak_flops_t),
            ("memory_gb", self.memory_gb),
            ("cost_per_hour_rmb", self.cost_per_hour_rmb),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("device {}: {field} must be positive, got {v}", self.name)));
            }
        }
        Ok(())
    }
}

fn profile(name: &str, flops: f64, mem: f64, cost: f64, fp8: bool) -> DeviceProfile {
    DeviceProfile { name: name.into(), peak_flops_t: flops, memory_gb: mem, cost_per_hour_rmb: cost, supports_fp8: fp8 }
}

/// Built-in devices A to E.
pub fn device_presets() -> Vec<DeviceProfile> {
    vec![
        profile("A", 370.0, 64.0, 7.0, false),
        profile("B", 120.0, 96.0, 4.5, false),
        profile("C", 312.0, 80.0, 10.0, false),
        profile("D", 989.0, 80.0, 27.5, true),
        profile("E", 147.0, 96.0, 5.64, true),
    ]
}

/// Looks up `name` in `overrides` first, then in the presets.
pub fn resolve_device(name: &str, overrides: &[DeviceProfile]) -> Result<DeviceProfile> {
    let found = overrides
        .iter()
        .find(|d| d.name == name)
        .cloned()
        .or_else(|| device_presets().into_iter().find(|d| d.name == name))
        .ok_or_else(|| Error::Config(format!("unknown device {name:?}")))?;
    found.validate()?;
    Ok(found)
}

/// `device_count × hours × cost_per_hour`.
pub fn estimate_cost(device: &DeviceProfile, device_count: u64, hours: f64) -> Result<f64> {
    device.validate()?;
    if device_count == 0 || !(hours > 0.0 && hours.is_finite()) {
        return Err(invalid("device count and hours must be positive"));
    }
    Ok(device_count as f64 * hours * device.cost_per_hour_rmb)
}

/// Savings of `b` relative to `a`, in percent.
pub fn compare_cost(a: f64, b: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(invalid("costs must be positive"));
    }
    Ok((a - b) / a * 100.0)
}

/// Wall-clock hours to process `tokens` given a device-hours-per-token
/// calibration.
pub fn hours_for_tokens(tokens: f64, device_count: u64, device_hours_per_token: f64) -> Result<f64> {
    if !(tokens > 0.0 && device_hours_per_token > 0.0) || device_count == 0 {
        return Err(invalid("tokens, device count and calibration must be positive"));
    }
    Ok(tokens * device_hours_per_token / device_count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostScenario {
    pub device: String,
    pub device_count: u64,
    /// Explicit hours; derived from `tokens` and the calibration when absent.
    pub hours: Option<f64>,
    pub tokens: Option<f64>,
    pub device_hours_per_token: Option<f64>,
}

impl CostScenario {
    pub fn hours(&self) -> Result<f64> {
        match (self.hours, self.tokens, self.device_hours_per_token) {
            (Some(h), _, _) => Ok(h),
            (None, Some(t), Some(c)) => hours_for_tokens(t, self.device_count, c),
            _ => Err(Error::Config(format!("scenario for {}: need hours or tokens with calibration", self.device))),
        }
    }

    pub fn cost(&self, overrides: &[DeviceProfile]) -> Result<f64> {
        estimate_cost(&resolve_device(&self.device, overrides)?, self.device_count, self.hours()?)
    }
}
