//! Skipped-batch retry queue and random re-injection into later steps.

use std::collections::VecDeque;

use crate::numcore::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct PendingBatch<T> {
    pub item: T,
    /// Step at which the batch was first scheduled.
    pub original_step: u64,
    /// Times the batch has been skipped.
    pub retries: u32,
}

/// Batches skipped and awaiting re-injection.
#[derive(Clone, Debug)]
pub struct RetryQueue<T> {
    pending: Vec<PendingBatch<T>>,
    rng: RngStream,
    enqueued: usize,
}

impl<T: Clone> RetryQueue<T> {
    pub fn new(rng: RngStream) -> Self {
        Self { pending: Vec::new(), rng, enqueued: 0 }
    }

    pub fn push(&mut self, batch: PendingBatch<T>) {
        self.enqueued += 1;
        self.pending.push(batch);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// Total pushes over the queue's lifetime.
    pub fn enqueued(&self) -> usize {
        self.enqueued
    }

    pub fn into_pending(self) -> Vec<PendingBatch<T>> {
        self.pending
    }
}

/// Extra batches attached to upcoming steps; slot 0 is the next step.
#[derive(Clone, Debug)]
pub struct RetrySchedule<T> {
    slots: VecDeque<Vec<PendingBatch<T>>>,
}

impl<T: Clone> Default for RetrySchedule<T> {
    fn default() -> Self {
        Self { slots: VecDeque::new() }
    }
}

impl<T: Clone> RetrySchedule<T> {
    /// Retried batches to merge into the next step's data.
    pub fn pop_next(&mut self) -> Vec<PendingBatch<T>> {
        self.slots.pop_front().unwrap_or_default()
    }

    pub fn insert(&mut self, offset: usize, batch: PendingBatch<T>) {
        while self.slots.len() <= offset {
            self.slots.push_back(Vec::new());
        }
        self.slots[offset].push(batch);
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_pending(self) -> Vec<PendingBatch<T>> {
        self.slots.into_iter().flatten().collect()
    }
}

/// Moves every pending batch onto a step chosen uniformly within the next
/// `horizon` steps. Returns the chosen offsets in queue order.
pub fn reinject<T: Clone>(queue: &mut RetryQueue<T>, schedule: &mut RetrySchedule<T>, horizon: usize) -> Vec<usize> {
    let horizon = horizon.max(1);
    let mut offsets = Vec::with_capacity(queue.pending.len());
    for batch in std::mem::take(&mut queue.pending) {
        let offset = queue.rng.below(horizon);
        offsets.push(offset);
        schedule.insert(offset, batch);
    }
    offsets
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pending(i: u64) -> PendingBatch<u64> {
        PendingBatch { item: i, original_step: i, retries: 1 }
    }

    #[test]
    fn empty_queue_leaves_schedule() {
        let mut q: RetryQueue<u64> = RetryQueue::new(RngStream::new(1, 1));
        let mut s = RetrySchedule::default();
        s.insert(3, pending(9));
        assert!(reinject(&mut q, &mut s, 50).is_empty());
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn fixed_seed_fixed_position() {
        let run = || {
            let mut q = RetryQueue::new(RngStream::new(4, 5));
            q.push(pending(1));
            let mut s = RetrySchedule::default();
            reinject(&mut q, &mut s, 50)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn positions_are_uniform_chi_square() {
        let horizon = 50;
        let mut q = RetryQueue::new(RngStream::new(2024, 1));
        let mut counts = vec![0usize; horizon];
        for trial in 0..10_000u64 {
            for i in 0..10 {
                q.push(pending(trial * 10 + i));
            }
            let mut s = RetrySchedule::default();
            for off in reinject(&mut q, &mut s, horizon) {
                counts[off] += 1;
            }
            assert_eq!(s.len(), 10);
        }
        let n: usize = counts.iter().sum();
        let expected = n as f64 / horizon as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 49 degrees of freedom
        assert!(chi2 < 74.92, "chi2 {chi2}");
    }

    #[test]
    fn schedule_pops_in_step_order() {
        let mut s = RetrySchedule::default();
        s.insert(2, pending(7));
        s.insert(0, pending(3));
        assert_eq!(s.pop_next()[0].item, 3);
        assert!(s.pop_next().is_empty());
        assert_eq!(s.pop_next()[0].item, 7);
        assert!(s.is_empty());
    }
}
