//! Top-k routing over softmax gates with stochastic routing warmup.
//!
//! During warmup (`global_step ≤ warmup_horizon`) the routing logits are
//! blended with synthetic logits drawn from the running logit statistics:
//! `ŝ = α·s + (1 − α)·(μ + σ·ε)` with `α = min(step / horizon, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numcore::{logsumexp, softmax_slice, topk_slice, RngStream, Tensor};

pub const DEFAULT_STATS_DECAY: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterState {
    pub mu_s: f64,
    pub sigma_s: f64,
    pub warmup_horizon: u64,
    pub global_step: i64,
    pub stats_initialized: bool,
    pub stats_decay: f64,
}

impl RouterState {
    pub fn new(warmup_horizon: u64) -> Self {
        Self {
            mu_s: 0.0,
            sigma_s: 0.0,
            warmup_horizon,
            global_step: 0,
            stats_initialized: false,
            stats_decay: DEFAULT_STATS_DECAY,
        }
    }

    pub fn alpha(&self) -> Result<f64> {
        if self.global_step < 0 {
            return Err(invalid(format!("negative global step {}", self.global_step)));
        }
        if self.warmup_horizon == 0 {
            return Ok(1.0);
        }
        Ok((self.global_step as f64 / self.warmup_horizon as f64).min(1.0))
    }

    pub fn in_warmup(&self) -> bool {
        self.global_step >= 0 && (self.global_step as u64) <= self.warmup_horizon
    }

    /// Folds a batch of raw router logits into `(μ_s, σ_s)`. The first batch
    /// initializes the statistics; later batches blend in by EMA. No-op once
    /// warmup is over.
    pub fn observe_logits(&mut self, raw: &Tensor) {
        if !self.in_warmup() || !raw.all_finite() {
            return;
        }
        let n = raw.len() as f64;
        let mean = raw.data().iter().sum::<f64>() / n;
        let var = raw.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if self.stats_initialized {
            let d = self.stats_decay;
            self.mu_s = d * self.mu_s + (1.0 - d) * mean;
            self.sigma_s = d * self.sigma_s + (1.0 - d) * std;
        } else {
            self.mu_s = mean;
            self.sigma_s = std;
            self.stats_initialized = true;
        }
    }
}

/// Result of routing one batch of `T` tokens.
#[derive(Clone, Debug)]
pub struct Routing {
    /// Learned logits `s = h·W_router`, `T × N`.
    pub raw_logits: Tensor,
    /// Logits after warmup blending, `T × N`.
    pub logits: Tensor,
    /// `softmax(logits)`, `T × N`.
    pub probs: Tensor,
    /// Selected expert indices per token, `T × k`, best first.
    pub indices: Vec<Vec<usize>>,
    /// `probs` at `indices` (not renormalized), `T × k`.
    pub gates: Tensor,
    /// `logsumexp` of each row of `logits`.
    pub lse: Vec<f64>,
    pub alpha: f64,
}

pub fn route(
    h: &Tensor,
    w_router: &Tensor,
    state: &RouterState,
    k_top: usize,
    rng: &mut RngStream,
) -> Result<Routing> {
    let raw_logits = h.matmul(w_router)?;
    if !raw_logits.all_finite() {
        return Err(Error::Numerical {
            layer: "router".into(),
            detail: "non-finite router logits".into(),
        });
    }
    let alpha = state.alpha()?;
    let (t, n) = raw_logits.dims2()?;
    if k_top == 0 || k_top > n {
        return Err(invalid(format!("k_top={k_top} outside 1..={n}")));
    }

    // One draw per (token, expert) regardless of alpha keeps the stream
    // position independent of the warmup phase.
    let noise: Vec<f64> = (0..t * n).map(|_| rng.normal()).collect();
    let logits = if alpha >= 1.0 {
        raw_logits.clone()
    } else {
        let mut l = raw_logits.clone();
        for (v, e) in l.data_mut().iter_mut().zip(&noise) {
            *v = alpha * *v + (1.0 - alpha) * (state.mu_s + state.sigma_s * e);
        }
        l
    };

    let mut probs = Tensor::zeros(&[t, n]);
    let mut gates = Tensor::zeros(&[t, k_top]);
    let mut indices = Vec::with_capacity(t);
    let mut lse = Vec::with_capacity(t);
    for r in 0..t {
        softmax_slice(logits.row(r), probs.row_mut(r));
        let top = topk_slice(probs.row(r), k_top)?;
        for (j, &(_, p)) in top.iter().enumerate() {
            gates.row_mut(r)[j] = p;
        }
        indices.push(top.into_iter().map(|(i, _)| i).collect());
        lse.push(logsumexp(logits.row(r)));
    }

    Ok(Routing { raw_logits, logits, probs, indices, gates, lse, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(t: usize, d: usize, n: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = RngStream::new(seed, 1);
        let h = Tensor::from_fn(&[t, d], |_| rng.normal());
        let w = Tensor::from_fn(&[d, n], |_| rng.normal());
        (h, w)
    }

    #[test]
    fn alpha_schedule() {
        let mut s = RouterState::new(10);
        let mut prev = -1.0;
        for i in 0..20 {
            s.global_step = i;
            let a = s.alpha().unwrap();
            assert!(a >= prev);
            prev = a;
            if i >= 10 {
                assert_eq!(a, 1.0);
            }
        }
        s.global_step = -1;
        assert!(s.alpha().is_err());
        let mut s = RouterState::new(0);
        s.global_step = 0;
        assert_eq!(s.alpha().unwrap(), 1.0);
    }

    #[test]
    fn fully_random_at_step_zero() {
        let (h, w) = setup(6, 4, 5, 2);
        let mut state = RouterState::new(100);
        state.mu_s = 0.3;
        state.sigma_s = 2.0;
        let mut rng = RngStream::new(5, 9);
        let r = route(&h, &w, &state, 2, &mut rng).unwrap();
        let mut rng2 = RngStream::new(5, 9);
        for v in r.logits.data() {
            let expected = 0.3 + 2.0 * rng2.normal();
            assert!((v - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn warmup_complete_is_pure_learned_routing() {
        let (h, w) = setup(6, 4, 5, 3);
        let mut state = RouterState::new(10);
        state.global_step = 10;
        state.sigma_s = 3.0;
        let r = route(&h, &w, &state, 2, &mut RngStream::new(1, 1)).unwrap();
        assert_eq!(r.logits, h.matmul(&w).unwrap());
        let mut rng = RngStream::new(1, 1);
        route(&h, &w, &state, 2, &mut rng).unwrap();
        // stream advanced by exactly T·N normals
        let mut reference = RngStream::new(1, 1);
        for _ in 0..30 {
            reference.normal();
        }
        assert_eq!(rng.state(), reference.state());
    }

    #[test]
    fn degenerate_noise_gives_uniform_gates() {
        let (h, w) = setup(3, 4, 4, 4);
        let state = RouterState::new(5);
        let r = route(&h, &w, &state, 2, &mut RngStream::new(2, 2)).unwrap();
        for t in 0..3 {
            assert_eq!(r.indices[t], vec![0, 1]);
            assert!(r.gates.row(t).iter().all(|&g| (g - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn stats_frozen_after_warmup() {
        let (h, w) = setup(8, 4, 4, 5);
        let raw = h.matmul(&w).unwrap();
        let mut s = RouterState::new(3);
        s.observe_logits(&raw);
        assert!(s.stats_initialized && s.sigma_s > 0.0);
        let (m, sd) = (s.mu_s, s.sigma_s);
        s.global_step = 4;
        s.observe_logits(&raw.map(|v| v * 10.0));
        assert_eq!((s.mu_s, s.sigma_s), (m, sd));
    }
}
