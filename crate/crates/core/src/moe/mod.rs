//! Mixture-of-experts feed-forward block with fine-grained routed experts,
//! an always-on shared expert, stochastic routing warmup, a normalized
//! output head and the balance / z auxiliary losses.

mod aux_loss;
mod config;
mod layer;
mod loss;
mod params;
mod router;

pub use aux_loss::{balance_loss, expert_load_stats, load_summary, slot_counts, z_loss, AuxLossReport, LoadStats};
pub use config::{AuxCoefficients, MoeConfig};
pub use layer::{moe_forward, normhead_forward, BlockCache, ExpertCache, Gradients, ModelCache, MoeModel};
pub use loss::{cross_entropy, mse_loss, Targets};
pub use params::{ExpertParams, MoeParams};
pub use router::{route, RouterState, Routing, DEFAULT_STATS_DECAY};
