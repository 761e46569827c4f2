//! Elastic local-update synchronization: worker replicas train locally and
//! periodically merge pseudo-gradients through anomaly elimination,
//! norm-based weighting and clipping.

mod merge;
mod penalty;
mod replica;
mod sync;

pub use merge::{merge_round, outer_update, EditConfig, FaultMode, FaultPlan, MergeState, RoundRecord};
pub use penalty::{
    anomaly_threshold,
    clip_pseudo_gradient, detect_anomalies, merge_weights, weighted_average, AnomalyTracker, EmaScope, NormStats,
    PenaltyConfig, Weighting,
};
pub use replica::{compute_pseudo_gradient, local_round, run_local_rounds, PseudoGradient, WorkerReplica};
pub use sync::{layer_costs, layerwise_sync_plan, should_sync, steps_in_round, CommModel, LayerCost, SyncPlan, SyncPolicy, SyncStage};
