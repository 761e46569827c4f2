use crate::error::{invalid, Error, Result};
use crate::numcore::{global_norm, Tensor};

/// Scales all tensors by `max_norm / g` when their global norm `g` exceeds
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(tensors: Vec<&mut Tensor>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(invalid(format!("clip threshold {max_norm} must be positive")));
    }
    let norm = global_norm(tensors.iter().map(|t| &**t));
    if !norm.is_finite() {
        return Err(Error::Anomaly(format!("non-finite gradient norm {norm}")));
    }
    if norm > max_norm {
        let s = max_norm / norm;
        for t in tensors {
            t.scale(s);
        }
    }
    Ok(norm)
}
