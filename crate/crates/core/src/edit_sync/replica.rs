//! Worker replicas, local rounds and pseudo-gradients.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::moe::{MoeModel, MoeParams};
use crate::numcore::RngStream;
use crate::optimizer::AdamWState;
use crate::spike_guard::SpikeGuard;

/// One simulated worker holding a full model copy and its own optimizer,
/// routing-noise stream and spike guard.
#[derive(Clone, Debug)]
pub struct WorkerReplica {
    pub worker_id: u32,
    pub model: MoeModel,
    pub optimizer: AdamWState,
    /// Local steps since the last synchronization.
    pub local_steps: u64,
    /// Local steps over the worker's lifetime; indexes its data shard.
    pub total_steps: u64,
    pub loss_trace: Vec<f64>,
    pub noise: RngStream,
    pub guard: Option<SpikeGuard>,
}

impl WorkerReplica {
    pub fn new(worker_id: u32, model: MoeModel, optimizer: AdamWState, noise: RngStream, guard: Option<SpikeGuard>) -> Self {
        Self { worker_id, model, optimizer, local_steps: 0, total_steps: 0, loss_trace: Vec::new(), noise, guard }
    }
}

/// Runs `steps` local iterations. `step` performs one
/// forward/backward/optimize iteration on the worker's shard, may record
/// into the worker's `sink`, and returns the step loss.
pub fn local_round<S, F>(worker: &mut WorkerReplica, steps: u64, sink: &mut S, step: &F) -> Result<()>
where
    F: Fn(&mut WorkerReplica, &mut S) -> Result<f64>,
{
    if steps == 0 {
        return Err(invalid("a local round needs at least one step"));
    }
    for _ in 0..steps {
        let loss = step(worker, sink)?;
        worker.loss_trace.push(loss);
        worker.local_steps += 1;
        worker.total_steps += 1;
    }
    Ok(())
}

/// Local rounds for all workers, optionally on the rayon pool. Results do
/// not depend on `parallel`; the first error in worker order is returned.
pub fn run_local_rounds<S, F>(
    workers: &mut [WorkerReplica],
    sinks: &mut [S],
    steps: &[u64],
    parallel: bool,
    step: &F,
) -> Result<()>
where
    S: Send,
    F: Fn(&mut WorkerReplica, &mut S) -> Result<f64> + Sync,
{
    if steps.len() != workers.len() || sinks.len() != workers.len() {
        return Err(invalid("one step count and sink per worker required"));
    }
    let results: Vec<Result<()>> = if parallel {
        workers
            .par_iter_mut()
            .zip(sinks.par_iter_mut())
            .zip(steps.par_iter())
            .map(|((w, sink), &s)| local_round(w, s, sink, step))
            .collect()
    } else {
        workers.iter_mut().zip(sinks.iter_mut()).zip(steps).map(|((w, sink), &s)| local_round(w, s, sink, step)).collect()
    };
    results.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoGradient {
    pub worker_id: u32,
    /// `θ_anchor − θ_local`, tensor by tensor.
    pub delta: MoeParams,
    pub norm: f64,
}

impl PseudoGradient {
    pub fn scaled(mut self, factor: f64) -> Self {
        self.delta.scale(factor);
        self.norm = self.delta.global_norm();
        self
    }
}

pub fn compute_pseudo_gradient(anchor: &MoeParams, worker: &WorkerReplica) -> Result<PseudoGradient> {
    let mut delta = anchor.clone();
    delta.axpy(-1.0, worker.model.params())?;
    let norm = delta.global_norm();
    Ok(PseudoGradient { worker_id: worker.worker_id, delta, norm })
}
