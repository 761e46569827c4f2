//! AdamW with decoupled weight decay and bias-corrected moments.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamWState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.step.to_le_bytes());
        for t in self.m.iter().chain(&self.v) {
            t.write_le_bytes(out);
        }
    }
}

/// One AdamW update. All gradients are checked before anything is written,
/// so a non-finite gradient leaves parameters and moments untouched and is
/// reported as [`Error::Anomaly`].
pub fn adamw_step(params: Vec<&mut Tensor>, grads: Vec<&Tensor>, state: &mut AdamWState, lr: f64) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(invalid(format!("learning rate {lr} must be non-negative")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid("parameter, gradient and moment counts differ"));
    }
    for (i, (p, g)) in params.iter().zip(&grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(invalid(format!("shape mismatch at tensor {i}")));
        }
        if !g.all_finite() {
            return Err(Error::Anomaly(format!("non-finite gradient in tensor {i}")));
        }
    }

    let AdamWConfig { beta1, beta2, eps, weight_decay } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv = *pv * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
