//! Per-worker bundle of detector, retry queue and event log.

use super::detector::{effective_lr, on_spike, SpikeAction, SpikeClass, SpikeConfig, SpikeDetector, SpikeEvent};
use super::retry::{reinject, PendingBatch, RetryQueue, RetrySchedule};
use crate::numcore::RngStream;

/// Outcome of judging one step's loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub class: SpikeClass,
    pub action: SpikeAction,
    /// `None` when the update is skipped.
    pub lr: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SpikeGuard {
    pub config: SpikeConfig,
    pub detector: SpikeDetector,
    queue: RetryQueue<u64>,
    schedule: RetrySchedule<u64>,
    pub events: Vec<SpikeEvent>,
    /// Offsets drawn by every re-injection, in order.
    pub reinjection_offsets: Vec<usize>,
}

impl SpikeGuard {
    pub fn new(config: SpikeConfig, rng: RngStream) -> Self {
        Self {
            detector: SpikeDetector::new(config.clone()),
            config,
            queue: RetryQueue::new(rng),
            schedule: RetrySchedule::default(),
            events: Vec::new(),
            reinjection_offsets: Vec::new(),
        }
    }

    /// Retried batches due at the next step.
    pub fn take_retries(&mut self) -> Vec<PendingBatch<u64>> {
        self.schedule.pop_next()
    }

    pub fn judge(&mut self, step: u64, worker: u32, loss: f64, contains_retry: bool, lr: f64) -> Verdict {
        let class = self.detector.observe(loss);
        let action = on_spike(class, contains_retry);
        let applied = effective_lr(action, lr, self.config.backoff_factor);
        if class != SpikeClass::Normal {
            self.events.push(SpikeEvent {
                step,
                worker,
                loss,
                classification: class,
                action,
                effective_lr: applied.unwrap_or(0.0),
            });
        }
        Verdict { class, action, lr: applied }
    }

    /// Queues skipped batches and spreads them over the retry horizon.
    pub fn requeue(&mut self, batches: impl IntoIterator<Item = PendingBatch<u64>>) {
        for mut b in batches {
            b.retries += 1;
            self.queue.push(b);
        }
        let offsets = reinject(&mut self.queue, &mut self.schedule, self.config.retry_horizon);
        self.reinjection_offsets.extend(offsets);
    }

    /// Batches skipped over the guard's lifetime.
    pub fn skipped(&self) -> usize {
        self.queue.enqueued()
    }

    /// Batch ids still waiting for a retry slot.
    pub fn unconsumed(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.schedule.clone().into_pending().into_iter().map(|p| p.item).collect();
        ids.extend(self.queue.clone().into_pending().into_iter().map(|p| p.item));
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skipped_batch_returns_within_horizon() {
        let mut g = SpikeGuard::new(SpikeConfig::default(), RngStream::new(3, 3));
        g.requeue([PendingBatch { item: 42, original_step: 7, retries: 0 }]);
        assert_eq!(g.skipped(), 1);
        assert_eq!(g.unconsumed(), vec![42]);
        let mut found = None;
        for step in 0..g.config.retry_horizon {
            let due = g.take_retries();
            if let Some(b) = due.first() {
                assert_eq!((b.item, b.retries), (42, 1));
                found = Some(step);
            }
        }
        assert_eq!(found, Some(g.reinjection_offsets[0]));
        assert!(g.unconsumed().is_empty());
    }

    #[test]
    fn repeated_wide_spike_on_retry_backs_off() {
        let mut g = SpikeGuard::new(SpikeConfig::default(), RngStream::new(3, 3));
        for i in 0..20 {
            g.judge(i, 0, 1.0 + 0.01 * (i % 5) as f64, false, 1e-3);
        }
        let v1 = g.judge(20, 0, 5.0, false, 1e-3);
        let v2 = g.judge(21, 0, 5.0, false, 1e-3);
        let v3 = g.judge(22, 0, 5.0, false, 1e-3);
        assert_eq!(v1.action, SpikeAction::Proceed);
        assert_eq!(v2.action, SpikeAction::Proceed);
        assert_eq!((v3.action, v3.lr), (SpikeAction::SkipAndRetry, None));
        let v4 = g.judge(23, 0, 5.0, true, 1e-3);
        assert_eq!(v4.action, SpikeAction::SkipRetryAndBackoff);
        assert_eq!(v4.lr, Some(0.5e-3));
        assert_eq!(g.events.len(), 4);
        assert_eq!(g.events[3].effective_lr, 0.5e-3);
    }
}
