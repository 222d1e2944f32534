//! Training, evaluation and sweep harness: synthetic tasks, Adam with
//! warmup/decay schedules, metrics persistence and the `hst` CLI.

pub mod config;
pub mod data;
pub mod error;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{ExperimentConfig, TrainConfig};
pub use data::{Split, Task, TaskSpec};
pub use error::{HarnessError, Result};
pub use sweep::{bottleneck_sweep, ModelKind, SweepReport};
pub use train::{evaluate, run_experiment, train_on, EvalResult, TrainOutcome, TrainRecord};
