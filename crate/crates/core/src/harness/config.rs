//! Experiment configuration, stored as TOML with a `schema_version` field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster_sim::{CostScenario, DeviceProfile, StepTimeModel};
use crate::edit_sync::{CommModel, EditConfig, FaultPlan, SyncPolicy};
use crate::error::{Error, Result};
use crate::moe::{AuxCoefficients, MoeConfig};
use crate::optimizer::{AdamWConfig, BatchSizeSchedule, LrSchedule};
use crate::scaling_fit::FlopsAccounting;
use crate::spike_guard::SpikeConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Regress the logits of a frozen random teacher of the same shape.
    TeacherStudent,
    /// Predict the teacher's argmax class (`vocab` classes).
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    pub input_mean: f64,
    pub input_std: f64,
    /// Standard deviation of Gaussian noise added to regression targets.
    pub target_noise: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::TeacherStudent,
            n_train: 4096,
            n_eval: 512,
            input_mean: 0.0,
            input_std: 1.0,
            target_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: BatchSizeSchedule,
    pub schedule: LrSchedule,
    pub optimizer: AdamWConfig,
    /// Global-norm gradient clip; 0 disables clipping.
    pub clip_norm: f64,
    pub aux: AuxCoefficients,
    /// Steps of stochastic routing warmup.
    pub router_warmup: u64,
    pub spike_guard: bool,
    /// Evaluate every this many steps; 0 evaluates only at start and end.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: BatchSizeSchedule::constant(128),
            schedule: LrSchedule::WarmupStableDecay { max_lr: 3e-3, warmup_steps: 20, halve_fraction: 0.6 },
            optimizer: AdamWConfig { weight_decay: 0.0, ..Default::default() },
            clip_norm: 0.0,
            aux: AuxCoefficients::default(),
            router_warmup: 50,
            spike_guard: true,
            eval_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    /// Training step whose batch is poisoned.
    pub step: u64,
    /// Factor applied to the poisoned batch's loss gradient.
    pub scale: f64,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self { step: 200, scale: 100.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_workers: u32,
    pub step_time: StepTimeModel,
    /// Per-worker fixed slowdowns; missing entries default to 1.
    pub slowdowns: Vec<f64>,
    pub policy: SyncPolicy,
    pub comm: CommModel,
    pub baseline_steps: u64,
    pub edit_rounds: u64,
    pub seeds: u64,
    /// Straggle multipliers for the severity sweep.
    pub sweep: Vec<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_workers: 8,
            step_time: StepTimeModel {
                base_step_time: 1.0,
                straggle_probability: 0.1,
                straggle_multiplier: 3.0,
                slowdown: 1.0,
            },
            slowdowns: Vec::new(),
            policy: SyncPolicy::TimeThreshold { tau: 10.0 },
            comm: CommModel { latency: 0.01, comm_per_param: 2e-5, compute_per_param: 1e-5 },
            baseline_steps: 1000,
            edit_rounds: 100,
            seeds: 20,
            sweep: vec![1.0, 1.5, 2.0, 3.0, 5.0],
        }
    }
}

impl SimConfig {
    pub fn worker_models(&self) -> Vec<StepTimeModel> {
        (0..self.n_workers as usize)
            .map(|w| StepTimeModel { slowdown: self.slowdowns.get(w).copied().unwrap_or(1.0), ..self.step_time })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    /// CSV of run records; synthetic records are generated when absent.
    pub records: Option<String>,
    pub accounting: FlopsAccounting,
    pub lever_at: Vec<f64>,
    /// Log-normal noise of synthetic batch-size and learning-rate records.
    pub synthetic_noise: f64,
    /// Additive noise of synthetic loss records.
    pub synthetic_loss_noise: f64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { records: None, accounting: FlopsAccounting::Activated, lever_at: vec![1e21, 1e24], synthetic_noise: 0.05, synthetic_loss_noise: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    pub a: CostScenario,
    pub b: CostScenario,
    /// Device definitions that replace or extend the built-in presets.
    pub devices: Vec<DeviceProfile>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            a: CostScenario { device: "D".into(), device_count: 1000, hours: Some(231.0), tokens: None, device_hours_per_token: None },
            b: CostScenario { device: "E".into(), device_count: 1000, hours: None, tokens: Some(1e12), device_hours_per_token: Some(9.0e-7) },
            devices: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub instances: u64,
    pub tokens: usize,
    pub model: MoeConfig,
    pub router_warmup: u64,
    /// Router step at which the check runs (inside warmup when < horizon).
    pub router_step: i64,
    pub aux: AuxCoefficients,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            tokens: 5,
            model: MoeConfig { d_model: 8, n_experts: 4, k_top: 2, d_expert_hidden: 4, shared_expert: true, d_shared_hidden: 4, vocab: 6 },
            router_warmup: 10,
            router_step: 3,
            aux: AuxCoefficients { balance: 0.5, z: 0.1 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: String,
    pub task: TaskSpec,
    pub model: MoeConfig,
    pub train: TrainConfig,
    pub spike: SpikeConfig,
    pub injection: InjectionConfig,
    pub edit: EditConfig,
    /// Worker fault applied during EDiT training.
    pub fault: Option<FaultPlan>,
    pub sim: SimConfig,
    pub scaling: ScalingConfig,
    pub cost: CostConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: "out".into(),
            task: TaskSpec::default(),
            model: MoeConfig::default(),
            train: TrainConfig::default(),
            spike: SpikeConfig::default(),
            injection: InjectionConfig::default(),
            edit: EditConfig::default(),
            fault: None,
            sim: SimConfig::default(),
            scaling: ScalingConfig::default(),
            cost: CostConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.train.schedule.validate()?;
        self.train.batch_size.validate()?;
        self.edit.validate()?;
        if self.task.n_train == 0 || self.task.n_eval == 0 || !(self.task.input_std > 0.0) {
            return Err(Error::Config("task needs positive n_train, n_eval and input_std".into()));
        }
        if !(self.train.clip_norm >= 0.0) || !(self.task.target_noise >= 0.0) {
            return Err(Error::Config("clip_norm and target_noise must be non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trip_is_byte_stable() {
        let text = ExperimentConfig::default().to_toml().unwrap();
        let parsed = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(parsed, ExperimentConfig::default());
        assert_eq!(parsed.to_toml().unwrap(), text);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\nseed = 9\n[train]\nsteps = 12\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.model, MoeConfig::default());
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again.to_toml().unwrap(), cfg.to_toml().unwrap());
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(ExperimentConfig::from_toml("schema_version = 2\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("schema_version = 1\nbogus = 3\n"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("schema_version = 1\n[model]\nk_top = 99\n").is_err());
    }

    #[test]
    fn tagged_sections_parse() {
        let text = "schema_version = 1\n[edit.policy]\nkind = \"time_threshold\"\ntau = 4.5\n[train.schedule]\nkind = \"constant\"\nlr = 0.01\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.edit.policy, SyncPolicy::TimeThreshold { tau: 4.5 });
        assert_eq!(cfg.train.schedule, LrSchedule::Constant { lr: 0.01 });

        let text = "schema_version = 1\n[fault]\nworker = 2\nfrom_round = 5\nmode = { corrupt = { factor = 100.0 } }\n";
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        let fault = cfg.fault.unwrap();
        assert_eq!((fault.worker, fault.from_round), (2, 5));
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}
