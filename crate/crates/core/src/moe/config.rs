use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Shape of one MoE feed-forward block plus its NormHead.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub d_model: usize,
    pub n_experts: usize,
    pub k_top: usize,
    pub d_expert_hidden: usize,
    pub shared_expert: bool,
    pub d_shared_hidden: usize,
    pub vocab: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            d_model: 16,
            n_experts: 8,
            k_top: 2,
            d_expert_hidden: 8,
            shared_expert: true,
            d_shared_hidden: 8,
            vocab: 16,
        }
    }
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_experts == 0 || self.d_expert_hidden == 0 || self.vocab == 0 {
            return Err(invalid("MoE dimensions must be positive"));
        }
        if self.k_top == 0 || self.k_top > self.n_experts {
            return Err(invalid(format!(
                "k_top={} must lie in 1..={}",
                self.k_top, self.n_experts
            )));
        }
        if self.shared_expert && self.d_shared_hidden == 0 {
            return Err(invalid("shared expert needs a positive hidden width"));
        }
        Ok(())
    }

    /// Splits each of `n_base` experts of width `d_base` into `granularity`
    /// narrower experts, keeping `n_experts · d_expert_hidden` fixed.
    pub fn fine_grained(
        d_model: usize,
        n_base: usize,
        d_base: usize,
        granularity: usize,
        k_top: usize,
        vocab: usize,
    ) -> Result<Self> {
        if granularity == 0 || d_base % granularity != 0 {
            return Err(invalid(format!(
                "granularity {granularity} must divide base width {d_base}"
            )));
        }
        let cfg = Self {
            d_model,
            n_experts: n_base * granularity,
            k_top,
            d_expert_hidden: d_base / granularity,
            shared_expert: true,
            d_shared_hidden: d_base,
            vocab,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parameters held by the routed experts (gate, up and down matrices).
    pub fn routed_param_count(&self) -> usize {
        self.n_experts * 3 * self.d_model * self.d_expert_hidden
    }

    pub fn param_count(&self) -> usize {
        let shared = if self.shared_expert { 3 * self.d_model * self.d_shared_hidden } else { 0 };
        self.d_model * self.n_experts + self.routed_param_count() + shared + self.vocab * self.d_model
    }
}

/// Weights of the auxiliary router losses in the total objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxCoefficients {
    pub balance: f64,
    pub z: f64,
}

impl Default for AuxCoefficients {
    fn default() -> Self {
        Self { balance: 0.015, z: 1e-4 }
    }
}

impl AuxCoefficients {
    pub const ZERO: Self = Self { balance: 0.0, z: 0.0 };
}
