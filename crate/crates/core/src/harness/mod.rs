//! Experiment orchestration: config, synthetic tasks, training loops and
//! the entry points behind the command-line tool.

pub mod config;
pub mod grad_check;
pub mod task;
pub mod train;
pub mod edit;
pub mod spike;
pub mod cluster;
pub mod scaling;
