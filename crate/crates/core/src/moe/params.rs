use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::MoeConfig;
use crate::error::{invalid, Result};
use crate::numcore::{RngStream, Tensor};

/// Gated two-matrix feed-forward unit: `(silu(x·W_gate) ⊙ (x·W_up))·W_down`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

impl ExpertParams {
    pub fn init(d_model: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let s_in = (1.0 / d_model as f64).sqrt();
        let s_out = (1.0 / hidden as f64).sqrt();
        Self {
            w_gate: Tensor::from_fn(&[d_model, hidden], |_| rng.normal() * s_in),
            w_up: Tensor::from_fn(&[d_model, hidden], |_| rng.normal() * s_in),
            w_down: Tensor::from_fn(&[hidden, d_model], |_| rng.normal() * s_out),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            w_gate: Tensor::zeros(self.w_gate.shape()),
            w_up: Tensor::zeros(self.w_up.shape()),
            w_down: Tensor::zeros(self.w_down.shape()),
        }
    }
}

/// All trainable tensors of the block. The same type carries gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeParams {
    /// `d_model × n_experts` router projection.
    pub router: Tensor,
    pub experts: Vec<ExpertParams>,
    pub shared: Option<ExpertParams>,
    /// `vocab × d_model` head, normalized per row at use.
    pub head: Tensor,
}

impl MoeParams {
    pub fn init(config: &MoeConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let router = Tensor::from_fn(&[d, config.n_experts], |_| rng.normal() * (1.0 / d as f64).sqrt());
        let experts = (0..config.n_experts)
            .map(|_| ExpertParams::init(d, config.d_expert_hidden, rng))
            .collect();
        let shared = config
            .shared_expert
            .then(|| ExpertParams::init(d, config.d_shared_hidden, rng));
        let head = Tensor::from_fn(&[config.vocab, d], |_| rng.normal());
        Ok(Self { router, experts, shared, head })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            router: Tensor::zeros(self.router.shape()),
            experts: self.experts.iter().map(ExpertParams::zeros_like).collect(),
            shared: self.shared.as_ref().map(ExpertParams::zeros_like),
            head: Tensor::zeros(self.head.shape()),
        }
    }

    /// Tensors in canonical order: router, experts (gate, up, down each),
    /// shared expert, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.router];
        for e in &self.experts {
            out.extend([&e.w_gate, &e.w_up, &e.w_down]);
        }
        if let Some(s) = &self.shared {
            out.extend([&s.w_gate, &s.w_up, &s.w_down]);
        }
        out.push(&self.head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.router];
        for e in &mut self.experts {
            out.extend([&mut e.w_gate, &mut e.w_up, &mut e.w_down]);
        }
        if let Some(s) = &mut self.shared {
            out.extend([&mut s.w_gate, &mut s.w_up, &mut s.w_down]);
        }
        out.push(&mut self.head);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["router".to_string()];
        for i in 0..self.experts.len() {
            for part in ["w_gate", "w_up", "w_down"] {
                out.push(format!("expert.{i}.{part}"));
            }
        }
        if self.shared.is_some() {
            for part in ["w_gate", "w_up", "w_down"] {
                out.push(format!("shared.{part}"));
            }
        }
        out.push("head".to_string());
        out
    }

    /// Synchronization units: `(name, tensor index range)` in forward order.
    pub fn layer_groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![("router".to_string(), 0..1)];
        let mut next = 1;
        for i in 0..self.experts.len() {
            out.push((format!("expert.{i}"), next..next + 3));
            next += 3;
        }
        if self.shared.is_some() {
            out.push(("shared".to_string(), next..next + 3));
            next += 3;
        }
        out.push(("head".to_string(), next..next + 1));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn global_norm(&self) -> f64 {
        crate::numcore::global_norm(self.tensors())
    }

    /// Shapes agree tensor by tensor.
    pub fn check_same_layout(&self, other: &MoeParams) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() || a.iter().zip(&b).any(|(x, y)| x.shape() != y.shape()) {
            return Err(invalid("parameter layouts differ"));
        }
        Ok(())
    }

    /// `self += s · other`, tensor by tensor.
    pub fn axpy(&mut self, s: f64, other: &MoeParams) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b)?;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(s));
    }

    pub fn write_le_bytes(&self, out: &mut Vec<u8>) {
        for t in self.tensors() {
            t.write_le_bytes(out);
        }
    }
}
