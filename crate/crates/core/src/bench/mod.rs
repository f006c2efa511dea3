//! Synthetic tasks, metrics, configuration and the experiment runner.

pub mod config;
pub mod metrics;
pub mod presets;
pub mod run;
pub mod tasks;

pub use config::ExperimentConfig;
pub use run::{run_experiment, ExperimentOutcome, MetricsRow, Split};
pub use tasks::{gen_task, SyntheticTask, TaskKind, TaskSpec};
