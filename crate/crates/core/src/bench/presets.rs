//! Ready-made experiments for the phenomena the benchmark illustrates.

use crate::bench::config::{Architecture, BankKind, ExperimentConfig};
use crate::bench::tasks::{TaskKind, TaskSpec};
use crate::policy::Strategy;

/// Diversity weight used by the collapse demo's second run.
pub const DIVERSITY_ALPHA: f64 = -0.5;

fn on(kind: TaskKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        task: TaskSpec::new(kind, 0),
        seed,
        ..ExperimentConfig::default()
    }
}

/// Two-mode linear data without meta, three scalar modules, one decision
/// by a neural Q-learning router on the input.
pub fn collapse(seed: u64, alpha: f64) -> ExperimentConfig {
    let mut cfg = on(TaskKind::TwoModeLinear, seed);
    cfg.router.strategy = Strategy::QLearning;
    cfg.router.neural = Some(true);
    cfg.router.epsilon = 0.05;
    cfg.rewards.alpha = alpha;
    cfg.router.lr = Some(0.01);
    cfg.epochs = 60;
    cfg
}

/// Depth-3 scalar routing keyed by the input's bucket on 32 noisy points.
pub fn overfit_routed(seed: u64) -> ExperimentConfig {
    let mut cfg = on(TaskKind::NoisyLinear, seed);
    cfg.max_depth = 3;
    cfg.router.neural = Some(false);
    cfg.router.input_buckets = 32;
    cfg.router.lr = Some(0.1);
    cfg.epochs = 200;
    cfg
}

/// A single scalar-linear module trained on the same data.
pub fn overfit_baseline(seed: u64) -> ExperimentConfig {
    let mut cfg = on(TaskKind::NoisyLinear, seed);
    cfg.bank.count = 1;
    cfg.epochs = 200;
    cfg
}

/// Four blob tasks, one tabular Q subrouter per task label.
pub fn meta_dispatched(seed: u64) -> ExperimentConfig {
    let mut cfg = on(TaskKind::MultitaskBlobs, seed);
    cfg.bank.kind = BankKind::Linear;
    cfg.bank.count = 4;
    cfg.architecture = Architecture::Dispatched;
    cfg.router.neural = Some(false);
    cfg.epochs = 200;
    cfg
}

/// The same tasks with the labels hidden and one neural router on the input.
pub fn meta_single(seed: u64) -> ExperimentConfig {
    let mut cfg = meta_dispatched(seed);
    cfg.task.meta = false;
    cfg.architecture = Architecture::Single;
    cfg.router.neural = Some(true);
    cfg
}

/// One module, no stop action: routing has nothing to choose.
pub fn reduction(seed: u64) -> ExperimentConfig {
    let mut cfg = on(TaskKind::NoisyLinear, seed);
    cfg.bank.count = 1;
    cfg.epochs = 50;
    cfg
}
