//! Heterogeneous-cluster throughput simulation and device cost accounting.

mod device;
mod sim;

pub use device::{compare_cost, device_presets, estimate_cost, hours_for_tokens, resolve_device, CostScenario, DeviceProfile};
pub use sim::{
    merge_overhead, simulate_edit, simulate_sync_baseline, speedup_ratio, EditSimResult, EventKind, SimEvent, SimTrace,
    StepTimeModel,
};
