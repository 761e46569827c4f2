//! Loss-spike classification, update skipping, retry re-injection and
//! learning-rate backoff.

mod detector;
mod guard;
mod retry;

pub use detector::{effective_lr, on_spike, SpikeAction, SpikeClass, SpikeConfig, SpikeDetector, SpikeEvent};
pub use guard::{SpikeGuard, Verdict};
pub use retry::{reinject, PendingBatch, RetryQueue, RetrySchedule};
