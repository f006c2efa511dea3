//! Builds a trainer from an [`ExperimentConfig`], runs it and records one
//! metrics row per epoch and split.

use std::fs::File;
use std::path::Path;

use crate::bank::{BankSpec, Init, ModuleBank, ModuleKind};
use crate::bench::config::{Architecture, BankKind, DispatchInput, ExperimentConfig};
use crate::bench::metrics::{detect_collapse, selection_entropy, usage_json, Usage};
use crate::bench::tasks::{gen_task, SyntheticTask};
use crate::engine::{InputBuckets, ModuleBanks, Router};
use crate::error::{Error, Result};
use crate::policy::{Approximator, Policy, PolicyConfig};
use crate::rng::{derive_seed, seeded};
use crate::train::{EvalSummary, SplitConfig, Trainer};

pub const CSV_HEADER: [&str; 7] = ["epoch", "split", "loss", "metric", "entropy", "usage_json", "collapse"];

const TASK_STREAM: u64 = 1;
const BANK_STREAM: u64 = 2;
const POLICY_STREAM: u64 = 3;
const SPLIT_STREAM: u64 = 4;
const ORDER_STREAM: u64 = 5;
const ROUTE_STREAM: u64 = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based epoch.
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
    pub entropy: f64,
    pub usage: Usage,
    pub collapse: bool,
}

impl MetricsRow {
    fn record(&self) -> [String; 7] {
        [
            self.epoch.to_string(),
            self.split.name().to_string(),
            self.loss.to_string(),
            self.metric.to_string(),
            self.entropy.to_string(),
            usage_json(&self.usage),
            self.collapse.to_string(),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub rows: Vec<MetricsRow>,
}

impl ExperimentOutcome {
    /// Rows of one split, in epoch order.
    pub fn split(&self, split: Split) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn last(&self, split: Split) -> &MetricsRow {
        self.split(split).last().expect("at least one epoch")
    }
}

/// Seed of the sample order in `epoch` (1-based).
pub fn order_seed(seed: u64, epoch: usize) -> u64 {
    derive_seed(seed, &[ORDER_STREAM, epoch as u64])
}

/// Generates the configured task.
pub fn build_task(cfg: &ExperimentConfig) -> Result<SyntheticTask> {
    let mut spec = cfg.task.clone();
    spec.seed = derive_seed(cfg.seed, &[TASK_STREAM]);
    gen_task(&spec)
}

fn bank_spec(cfg: &ExperimentConfig, seed: u64) -> BankSpec {
    let kind = match cfg.bank.kind {
        BankKind::ScalarLinear => ModuleKind::ScalarLinear,
        BankKind::Linear => ModuleKind::Linear,
        BankKind::Mlp => ModuleKind::Mlp {
            hidden: cfg.bank.hidden,
        },
    };
    BankSpec {
        kind,
        count: cfg.bank.count,
        in_dim: cfg.task.input_dim(),
        out_dim: cfg.task.output_dim(),
        init: if cfg.bank.identity_init {
            Init::Identity
        } else {
            Init::Uniform
        },
        allow_termination: cfg.bank.termination,
        allow_skip: cfg.bank.skip,
        seed,
    }
}

fn build_banks(cfg: &ExperimentConfig) -> Result<ModuleBanks> {
    let seed = derive_seed(cfg.seed, &[BANK_STREAM]);
    if cfg.bank.per_depth {
        let banks = (0..cfg.max_depth)
            .map(|d| ModuleBank::build(&bank_spec(cfg, derive_seed(seed, &[d as u64]))))
            .collect::<Result<_>>()?;
        Ok(ModuleBanks::per_depth(banks))
    } else {
        Ok(ModuleBanks::shared(ModuleBank::build(&bank_spec(cfg, seed))?))
    }
}

fn policy(cfg: &ExperimentConfig, action_count: usize, index: u64) -> Result<Policy> {
    let neural = cfg.router_is_neural();
    let approximator = if neural {
        Approximator::Neural {
            hidden: cfg.router.hidden,
        }
    } else {
        Approximator::Tabular
    };
    let meta_count = match cfg.task.meta_count() {
        0 => cfg.router.input_buckets,
        m => m,
    };
    Policy::new(PolicyConfig {
        lr: cfg.router_lr(),
        epsilon: cfg.router.epsilon,
        tau: cfg.router.tau,
        baseline_decay: cfg.router.baseline_decay,
        input_dim: if neural { cfg.task.input_dim() } else { 0 },
        meta_count: if neural { meta_count } else { 0 },
        max_depth: cfg.max_depth,
        control_variate_lr: cfg.router.cv_lr,
        seed: derive_seed(cfg.seed, &[POLICY_STREAM, index]),
        ..PolicyConfig::new(cfg.router.strategy, approximator, action_count)
    })
}

/// Builds the trainer; every configuration error surfaces here.
pub fn build_trainer(cfg: &ExperimentConfig) -> Result<Trainer> {
    cfg.validate()?;
    let banks = build_banks(cfg)?;
    let actions = banks.at(0)?.action_space_size();
    let router = match cfg.architecture {
        Architecture::Single => Router::single(policy(cfg, actions, 0)?, cfg.max_depth)?,
        Architecture::PerDecision => {
            let policies = (0..cfg.max_depth)
                .map(|d| policy(cfg, actions, d as u64))
                .collect::<Result<_>>()?;
            Router::per_decision(policies)?
        }
        Architecture::Dispatched => {
            let count = match cfg.dispatch {
                DispatchInput::Meta => cfg.task.meta_count(),
                DispatchInput::Input => cfg.dispatch_count,
            };
            let subs = (0..count)
                .map(|i| policy(cfg, actions, i as u64))
                .collect::<Result<_>>()?;
            match cfg.dispatch {
                DispatchInput::Meta => Router::dispatched_by_meta(subs, cfg.max_depth)?,
                DispatchInput::Input => {
                    let dispatcher = policy(cfg, count, count as u64)?;
                    Router::dispatched_by_input(dispatcher, subs, cfg.max_depth)?
                }
            }
        }
    };
    let router = if cfg.router.input_buckets > 0 {
        router.with_input_buckets(InputBuckets {
            count: cfg.router.input_buckets,
            low: -1.0,
            high: 1.0,
        })?
    } else {
        router
    };
    Trainer::new(router, banks, cfg.rewards.clone(), cfg.optimizer)
}

fn row(epoch: usize, split: Split, eval: EvalSummary, threshold: f64) -> Result<MetricsRow> {
    let entropy = selection_entropy(&eval.usage)?;
    Ok(MetricsRow {
        epoch,
        split,
        loss: eval.loss,
        metric: eval.metric,
        entropy,
        collapse: detect_collapse(&[entropy], threshold),
        usage: eval.usage,
    })
}

/// Trains per `cfg`, evaluating on both splits after every epoch. When
/// `cfg.out` is set the CSV is written row by row, so a numeric abort
/// leaves the completed epochs on disk.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let task = build_task(cfg)?;
    let mut trainer = build_trainer(cfg)?;
    let split = SplitConfig {
        seed: derive_seed(cfg.seed, &[SPLIT_STREAM]),
        ..cfg.split
    };
    let roles = split.assign(task.train.len());
    let mut writer = cfg.out.as_deref().map(csv_writer).transpose()?;
    let mut rng = seeded(derive_seed(cfg.seed, &[ROUTE_STREAM]));
    let mut rows = Vec::with_capacity(2 * cfg.epochs);
    for epoch in 1..=cfg.epochs {
        trainer.train_epoch(&task.train, &roles, order_seed(cfg.seed, epoch), &mut rng)?;
        for (split, data) in [(Split::Train, &task.train), (Split::Test, &task.test)] {
            let eval = trainer.evaluate(data).map_err(|e| abort(e, epoch, split))?;
            let r = row(epoch, split, eval, cfg.collapse_threshold)?;
            if let Some(w) = writer.as_mut() {
                w.write_record(r.record())?;
                w.flush()?;
            }
            rows.push(r);
        }
    }
    Ok(ExperimentOutcome { rows })
}

fn abort(e: Error, epoch: usize, split: Split) -> Error {
    if e.is_numeric() && !matches!(e, Error::NumericAbort { .. }) {
        Error::NumericAbort {
            step: epoch,
            path: format!("evaluate {}", split.name()),
            reason: e.to_string(),
        }
    } else {
        e
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    w.flush()?;
    Ok(w)
}
