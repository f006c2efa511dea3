//! Experiment configuration and its flat `key = value` file format.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `task` | `two-mode-linear` | `two-mode-linear`, `noisy-linear` or `multitask-blobs` |
//! | `task.train_size` | per task | training samples (per task for blobs) |
//! | `task.test_size` | per task | test samples (per task for blobs) |
//! | `task.noise` | per task | noise standard deviation |
//! | `task.tasks` | 4 | blob tasks |
//! | `task.dims` | 8 | blob input dimensions |
//! | `task.separation` | 4 | blob centre distance in noise units |
//! | `task.meta` | per task | attach mode/task labels as meta |
//! | `architecture` | `single` | `single`, `per-decision` or `dispatched` |
//! | `dispatch` | `meta` | dispatcher input: `meta` or `input` |
//! | `dispatch.count` | 2 | subrouters when dispatching by input |
//! | `max_depth` | 1 | routing decisions per sample |
//! | `bank.kind` | `scalar-linear` | `scalar-linear`, `linear` or `mlp` |
//! | `bank.count` | 3 | modules per bank |
//! | `bank.hidden` | 16 | hidden width of `mlp` modules |
//! | `bank.init` | `uniform` | `uniform` or `identity` |
//! | `bank.termination` | false | offer the stop action |
//! | `bank.skip` | false | offer the skip action |
//! | `bank.per_depth` | false | a separate bank at every depth |
//! | `router.strategy` | `q-learning` | see [`Strategy`] names |
//! | `router.approximator` | `auto` | `tabular`, `neural`, or `auto`: tabular when states carry meta labels or input buckets |
//! | `router.hidden` | 16 | hidden width of neural routers |
//! | `router.lr` | 0.1 × `optimizer.lr` | router learning rate |
//! | `router.epsilon` | 0.05 | exploration rate |
//! | `router.tau` | 0.5 | relaxation temperature |
//! | `router.baseline_decay` | 0.1 | running-mean baseline rate |
//! | `router.cv_lr` | 0.01 | control variate learning rate |
//! | `router.input_buckets` | 0 | key meta-less states by input bucket (0: off) |
//! | `reward.final` | `neg-loss` | `neg-loss` or `plus-minus-one` |
//! | `reward.alpha` | 0 | regularization reward weight |
//! | `reward.window` | 50 × actions | usage window length |
//! | `reward.kappa` | 0 | exploratory squash exponent |
//! | `split.module_fraction` | 1 | share of samples that train modules |
//! | `split.router_fraction` | 1 | share of samples that train the router |
//! | `optimizer` | `sgd` | `sgd`, `momentum` or `adam` |
//! | `optimizer.lr` | 0.05 | module learning rate |
//! | `optimizer.momentum` | 0.9 | momentum coefficient |
//! | `epochs` | 50 | training epochs |
//! | `seed` | 0 | master seed |
//! | `collapse_threshold` | 0.1 | entropy below which a row is flagged |
//! | `out` | none | CSV output path |

use std::path::{Path, PathBuf};

use crate::bench::metrics::COLLAPSE_THRESHOLD;
use crate::bench::tasks::{TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::lab::LabConfig;
use crate::nn::{OptimizerConfig, OptimizerKind};
use crate::policy::Strategy;
use crate::train::{FinalRewardKind, RewardConfig, SplitConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    Single,
    PerDecision,
    Dispatched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchInput {
    Meta,
    Input,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BankKind {
    ScalarLinear,
    Linear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSettings {
    pub kind: BankKind,
    pub count: usize,
    pub hidden: usize,
    pub identity_init: bool,
    pub termination: bool,
    pub skip: bool,
    pub per_depth: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterSettings {
    pub strategy: Strategy,
    /// `None` picks tabular when states carry meta labels or input
    /// buckets, neural otherwise.
    pub neural: Option<bool>,
    pub hidden: usize,
    /// `None` means 0.1 × the module learning rate.
    pub lr: Option<f64>,
    pub epsilon: f64,
    pub tau: f64,
    pub baseline_decay: f64,
    pub cv_lr: f64,
    pub input_buckets: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub architecture: Architecture,
    pub dispatch: DispatchInput,
    pub dispatch_count: usize,
    pub max_depth: usize,
    pub bank: BankSettings,
    pub router: RouterSettings,
    pub rewards: RewardConfig,
    pub split: SplitConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub seed: u64,
    pub collapse_threshold: f64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::new(TaskKind::TwoModeLinear, 0),
            architecture: Architecture::Single,
            dispatch: DispatchInput::Meta,
            dispatch_count: 2,
            max_depth: 1,
            bank: BankSettings {
                kind: BankKind::ScalarLinear,
                count: 3,
                hidden: 16,
                identity_init: false,
                termination: false,
                skip: false,
                per_depth: false,
            },
            router: RouterSettings {
                strategy: Strategy::QLearning,
                neural: None,
                hidden: 16,
                lr: None,
                epsilon: 0.05,
                tau: 0.5,
                baseline_decay: 0.1,
                cv_lr: 0.01,
                input_buckets: 0,
            },
            rewards: RewardConfig::default(),
            split: SplitConfig::default(),
            optimizer: OptimizerConfig::sgd(0.05),
            epochs: 50,
            seed: 0,
            collapse_threshold: COLLAPSE_THRESHOLD,
            out: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn choice<T: Copy>(key: &str, v: &str, options: &[(&str, T)]) -> Result<T> {
    options
        .iter()
        .find(|(name, _)| *name == v)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<_> = options.iter().map(|(n, _)| *n).collect();
            Error::config(format!("`{key}`: expected one of {}, got `{v}`", names.join(", ")))
        })
}

/// Splits a config body into `(key, value)` pairs, dropping blank lines
/// and `#` comments.
pub fn pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
        out.push((key.trim(), value.trim()));
    }
    Ok(out)
}

/// Estimator-lab settings: `ks` (comma-separated action counts), `tau`,
/// `baseline_decay`, `relax_warmup`, `cv_lr`, `cv_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabSettings {
    pub ks: Vec<usize>,
    pub lab: LabConfig,
}

impl Default for LabSettings {
    fn default() -> Self {
        LabSettings {
            ks: vec![2, 4, 8, 16, 32],
            lab: LabConfig::default(),
        }
    }
}

impl LabSettings {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = LabSettings::default();
        for (key, v) in pairs(text)? {
            match key {
                "ks" => out.ks = v.split(',').map(|k| parse_num(key, k.trim())).collect::<Result<_>>()?,
                "tau" => out.lab.tau = parse_num(key, v)?,
                "baseline_decay" => out.lab.baseline_decay = parse_num(key, v)?,
                "relax_warmup" => out.lab.relax_warmup = parse_num(key, v)?,
                "cv_lr" => out.lab.control_variate_lr = parse_num(key, v)?,
                "cv_hidden" => out.lab.control_variate_hidden = parse_num(key, v)?,
                _ => return Err(Error::config(format!("unknown key `{key}`"))),
            }
        }
        if out.ks.is_empty() || out.ks.contains(&0) {
            return Err(Error::config("`ks` needs positive action counts"));
        }
        if !(out.lab.tau > 0.0) {
            return Err(Error::config("`tau` must be positive"));
        }
        Ok(out)
    }
}

impl ExperimentConfig {
    /// Parses a config file body. Task-specific defaults are applied when
    /// `task` is read, so it should come before other `task.*` keys.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut momentum = 0.9;
        let mut optimizer = "sgd".to_string();
        for (key, value) in pairs(text)? {
            match key {
                "optimizer" => optimizer = value.to_string(),
                "optimizer.momentum" => momentum = parse_num(key, value)?,
                _ => cfg.set(key, value)?,
            }
        }
        cfg.optimizer.kind = match optimizer.as_str() {
            "sgd" => OptimizerKind::PlainSgd,
            "momentum" => OptimizerKind::Momentum { momentum },
            "adam" => OptimizerKind::adam(),
            other => return Err(Error::config(format!("`optimizer`: unknown optimizer `{other}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "task" => {
                let kind: TaskKind = v.parse()?;
                if kind != self.task.kind {
                    self.task = TaskSpec::new(kind, self.task.seed);
                }
            }
            "task.train_size" => self.task.train_size = parse_num(key, v)?,
            "task.test_size" => self.task.test_size = parse_num(key, v)?,
            "task.noise" => self.task.noise = parse_num(key, v)?,
            "task.tasks" => self.task.tasks = parse_num(key, v)?,
            "task.dims" => self.task.dims = parse_num(key, v)?,
            "task.separation" => self.task.separation = parse_num(key, v)?,
            "task.meta" => self.task.meta = parse_bool(key, v)?,
            "architecture" => {
                self.architecture = choice(
                    key,
                    v,
                    &[
                        ("single", Architecture::Single),
                        ("per-decision", Architecture::PerDecision),
                        ("dispatched", Architecture::Dispatched),
                    ],
                )?
            }
            "dispatch" => {
                self.dispatch = choice(
                    key,
                    v,
                    &[("meta", DispatchInput::Meta), ("input", DispatchInput::Input)],
                )?
            }
            "dispatch.count" => self.dispatch_count = parse_num(key, v)?,
            "max_depth" => self.max_depth = parse_num(key, v)?,
            "bank.kind" => {
                self.bank.kind = choice(
                    key,
                    v,
                    &[
                        ("scalar-linear", BankKind::ScalarLinear),
                        ("linear", BankKind::Linear),
                        ("mlp", BankKind::Mlp),
                    ],
                )?
            }
            "bank.count" => self.bank.count = parse_num(key, v)?,
            "bank.hidden" => self.bank.hidden = parse_num(key, v)?,
            "bank.init" => self.bank.identity_init = choice(key, v, &[("uniform", false), ("identity", true)])?,
            "bank.termination" => self.bank.termination = parse_bool(key, v)?,
            "bank.skip" => self.bank.skip = parse_bool(key, v)?,
            "bank.per_depth" => self.bank.per_depth = parse_bool(key, v)?,
            "router.strategy" => self.router.strategy = v.parse()?,
            "router.approximator" => {
                self.router.neural = choice(
                    key,
                    v,
                    &[("auto", None), ("tabular", Some(false)), ("neural", Some(true))],
                )?
            }
            "router.hidden" => self.router.hidden = parse_num(key, v)?,
            "router.lr" => self.router.lr = Some(parse_num(key, v)?),
            "router.epsilon" => self.router.epsilon = parse_num(key, v)?,
            "router.tau" => self.router.tau = parse_num(key, v)?,
            "router.baseline_decay" => self.router.baseline_decay = parse_num(key, v)?,
            "router.cv_lr" => self.router.cv_lr = parse_num(key, v)?,
            "router.input_buckets" => self.router.input_buckets = parse_num(key, v)?,
            "reward.final" => {
                self.rewards.final_kind = choice(
                    key,
                    v,
                    &[
                        ("neg-loss", FinalRewardKind::NegativeLoss),
                        ("plus-minus-one", FinalRewardKind::PlusMinusOne),
                    ],
                )?
            }
            "reward.alpha" => self.rewards.alpha = parse_num(key, v)?,
            "reward.window" => self.rewards.window = Some(parse_num(key, v)?),
            "reward.kappa" => self.rewards.kappa = parse_num(key, v)?,
            "split.module_fraction" => self.split.module_fraction = parse_num(key, v)?,
            "split.router_fraction" => self.split.router_fraction = parse_num(key, v)?,
            "optimizer.lr" => self.optimizer.learning_rate = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "collapse_threshold" => self.collapse_threshold = parse_num(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn has_state_labels(&self) -> bool {
        self.task.meta_count() > 0 || self.router.input_buckets > 0
    }

    /// Resolves the `auto` approximator.
    pub fn router_is_neural(&self) -> bool {
        self.router.neural.unwrap_or(!self.has_state_labels())
    }

    pub fn router_lr(&self) -> f64 {
        self.router.lr.unwrap_or(0.1 * self.optimizer.learning_rate)
    }

    /// Checks everything that can be checked without building the model.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.optimizer.validate()?;
        self.split.validate()?;
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("max depth must be positive"));
        }
        if self.bank.count == 0 {
            return Err(Error::config("bank needs at least one module"));
        }
        if !(self.collapse_threshold >= 0.0) {
            return Err(Error::config("collapse threshold must be nonnegative"));
        }
        if self.bank.kind == BankKind::ScalarLinear && self.task.input_dim() != 1 {
            return Err(Error::config("scalar-linear modules need a one-dimensional task"));
        }
        if self.max_depth > 1 && self.task.input_dim() != self.task.output_dim() {
            return Err(Error::config(format!(
                "depth {} needs equal input and output widths, task has {} and {}",
                self.max_depth,
                self.task.input_dim(),
                self.task.output_dim()
            )));
        }
        if self.architecture == Architecture::Dispatched {
            match self.dispatch {
                DispatchInput::Meta if self.task.meta_count() == 0 => {
                    return Err(Error::config("dispatching by meta needs a task with meta labels"));
                }
                DispatchInput::Input if self.dispatch_count == 0 => {
                    return Err(Error::config("dispatching by input needs at least one subrouter"));
                }
                _ => {}
            }
        }
        if !self.router_is_neural() && !self.has_state_labels() {
            return Err(Error::config(
                "tabular routers key on meta labels: enable `task.meta` or `router.input_buckets`",
            ));
        }
        if !(self.router_lr() > 0.0) {
            return Err(Error::config("router learning rate must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::parse("# nothing\n\n").unwrap(),
            ExperimentConfig::default()
        );
        assert_eq!(ExperimentConfig::default().router_lr(), 0.1 * 0.05);
        assert!(ExperimentConfig::default().router_is_neural());
        let blobs =
            ExperimentConfig::parse("task = multitask-blobs\nbank.kind = linear\narchitecture = dispatched").unwrap();
        assert!(!blobs.router_is_neural());
    }

    #[test]
    fn parses_keys() {
        let cfg = ExperimentConfig::parse(
            "task = noisy-linear\nmax_depth = 3 # deep\nrouter.input_buckets = 16\n\
             reward.alpha = -0.5\noptimizer = momentum\noptimizer.momentum = 0.5\nrouter.strategy = relax\n",
        )
        .unwrap();
        assert_eq!(cfg.task.kind, TaskKind::NoisyLinear);
        assert_eq!(cfg.task.train_size, 32);
        assert_eq!(cfg.max_depth, 3);
        assert_eq!(cfg.router.input_buckets, 16);
        assert_eq!(cfg.rewards.alpha, -0.5);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Momentum { momentum: 0.5 });
        assert_eq!(cfg.router.strategy, Strategy::Relax);
    }

    #[test]
    fn lab_settings() {
        let s = LabSettings::parse("ks = 4, 8\ntau = 1.0\n").unwrap();
        assert_eq!(s.ks, vec![4, 8]);
        assert_eq!(s.lab.tau, 1.0);
        assert_eq!(LabSettings::parse("").unwrap(), LabSettings::default());
        assert!(LabSettings::parse("ks = 0").is_err());
        assert!(LabSettings::parse("k = 4").is_err());
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus = 1",
            "epochs",
            "epochs = many",
            "task = images",
            "bank.termination = maybe",
            "epochs = 0",
            "task = multitask-blobs",
            "task = multitask-blobs\nbank.kind = linear\nmax_depth = 2",
            "architecture = dispatched",
            "optimizer = lbfgs",
            "router.approximator = tabular",
            "router.approximator = lookup",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
    }
}
