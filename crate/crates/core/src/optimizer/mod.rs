//! AdamW, global-norm clipping and training schedules.

mod adamw;
mod clip;
mod schedule;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use clip::clip_global_norm;
pub use schedule::{
    batch_size_at, halve_boundary, inv_sqrt_lr, token_fraction_step, wsd_lr, BatchSizeSchedule, LrSchedule,
    DEFAULT_ANNEAL_END, DEFAULT_ANNEAL_START, DEFAULT_HALVE_FRACTION, DEFAULT_MAX_LR, DEFAULT_WARMUP_STEPS,
};
