//! Deterministic desk-scale training engine for sparse mixture-of-experts
//! models, with elastic local-SGD synchronization, loss-spike guarding,
//! heterogeneous cluster simulation and scaling-law fitting.

pub mod checkpoint;
pub mod cluster_sim;
pub mod edit_sync;
pub mod error;
pub mod harness;
pub mod moe;
pub mod numcore;
pub mod optimizer;
pub mod scaling_fit;
pub mod spike_guard;

pub use error::{Error, Result};
