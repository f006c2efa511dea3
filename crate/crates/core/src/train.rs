//! Rewards and the joint module/router training step.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::engine::{Decider, ModuleBanks, Router, Trajectory, TrajectoryStep};
use crate::error::{Error, Result};
use crate::nn::{optimizer_step, Graph, NodeId, OptimizerConfig, Parameter, Tensor};
use crate::policy::{argmax, Mode, Strategy, ValueStep};
use crate::rng::seeded;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinalRewardKind {
    /// +1 for a correct class, −1 otherwise.
    PlusMinusOne,
    /// The negated model loss.
    NegativeLoss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    pub final_kind: FinalRewardKind,
    /// Regularization coefficient α in [−1, 1]; negative favours diversity.
    pub alpha: f64,
    /// Usage window per decision slot; `None` means 50 × action-space size.
    pub window: Option<usize>,
    /// Exploration squash exponent κ ≥ 0.
    pub kappa: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            final_kind: FinalRewardKind::NegativeLoss,
            alpha: 0.0,
            window: None,
            kappa: 0.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self, action_space_size: usize) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [-1, 1], got {}", self.alpha)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::config(format!("kappa must be nonnegative, got {}", self.kappa)));
        }
        if self.window_size(action_space_size) < action_space_size {
            return Err(Error::config(format!(
                "usage window {} is smaller than the action space ({action_space_size})",
                self.window_size(action_space_size)
            )));
        }
        Ok(())
    }

    pub fn window_size(&self, action_space_size: usize) -> usize {
        self.window.unwrap_or(50 * action_space_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub target: Target,
    pub meta: Option<usize>,
}

/// Trajectory-level reward from the model output.
pub fn final_reward(cfg: &RewardConfig, prediction: &Tensor, target: &Target, model_loss: f64) -> Result<f64> {
    match (cfg.final_kind, target) {
        // Subtracting from 0 keeps a perfect fit at +0 rather than −0.
        (FinalRewardKind::NegativeLoss, _) => Ok(0.0 - model_loss),
        (FinalRewardKind::PlusMinusOne, Target::Class(c)) => Ok(if argmax(prediction.data()) == Some(*c) {
            1.0
        } else {
            -1.0
        }),
        (FinalRewardKind::PlusMinusOne, Target::Values(_)) => {
            Err(Error::config("a ±1 reward needs a classification target"))
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    recent: VecDeque<usize>,
    counts: Vec<usize>,
}

/// The last `W` chosen action indices per decision slot.
#[derive(Clone, Debug)]
pub struct UsageWindow {
    capacity: usize,
    slots: BTreeMap<usize, Slot>,
}

impl UsageWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "usage window needs a positive size");
        UsageWindow {
            capacity,
            slots: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, slot: usize, index: usize) {
        let s = self.slots.entry(slot).or_default();
        if s.counts.len() <= index {
            s.counts.resize(index + 1, 0);
        }
        if s.recent.len() == self.capacity {
            let old = s.recent.pop_front().expect("full window");
            s.counts[old] -= 1;
        }
        s.recent.push_back(index);
        s.counts[index] += 1;
    }

    /// Decisions currently held for `slot`.
    pub fn observed(&self, slot: usize) -> usize {
        self.slots.get(&slot).map_or(0, |s| s.recent.len())
    }

    pub fn count(&self, slot: usize, index: usize) -> usize {
        self.slots
            .get(&slot)
            .and_then(|s| s.counts.get(index).copied())
            .unwrap_or(0)
    }

    /// `C(a)`: share of the window taken by `index`; 0 for an empty window.
    pub fn frequency(&self, slot: usize, index: usize) -> f64 {
        match self.observed(slot) {
            0 => 0.0,
            n => self.count(slot, index) as f64 / n as f64,
        }
    }
}

/// `(α/t)·C(a)` for trajectory length `t ≥ 1`.
pub fn reg_reward(cfg: &RewardConfig, window: &UsageWindow, slot: usize, index: usize, t: usize) -> f64 {
    assert!(t >= 1, "trajectory length must be positive");
    if cfg.alpha == 0.0 {
        return 0.0;
    }
    cfg.alpha / t as f64 * window.frequency(slot, index)
}

/// `(1 − exploratory/t)^κ`.
pub fn squash_multiplier(kappa: f64, exploratory: usize, t: usize) -> f64 {
    assert!(t >= 1 && exploratory <= t, "need 0 ≤ exploratory ≤ t, t ≥ 1");
    (1.0 - exploratory as f64 / t as f64).powf(kappa)
}

/// Which updates a training sample feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Role {
    pub module: bool,
    pub router: bool,
}

impl Role {
    pub const BOTH: Role = Role {
        module: true,
        router: true,
    };
}

/// Seeded partition of the training set. After a seeded shuffle the first
/// `1 − router_fraction` of samples train modules only, the last
/// `1 − module_fraction` train the router only, and the rest train both.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub module_fraction: f64,
    pub router_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            module_fraction: 1.0,
            router_fraction: 1.0,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(self.module_fraction) || !ok(self.router_fraction) {
            return Err(Error::config("split fractions must lie in (0, 1]"));
        }
        if self.module_fraction + self.router_fraction < 1.0 {
            return Err(Error::config("split fractions must cover every sample"));
        }
        Ok(())
    }

    pub fn assign(&self, n: usize) -> Vec<Role> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded(self.seed));
        let module_only = ((1.0 - self.router_fraction) * n as f64).round() as usize;
        let router_only = ((1.0 - self.module_fraction) * n as f64).round() as usize;
        let mut roles = vec![Role::BOTH; n];
        for (rank, &i) in order.iter().enumerate() {
            if rank < module_only {
                roles[i] = Role {
                    module: true,
                    router: false,
                };
            } else if rank >= n - router_only.min(n - module_only) {
                roles[i] = Role {
                    module: false,
                    router: true,
                };
            }
        }
        roles
    }
}

/// What one trained sample produced.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub loss: f64,
    pub final_reward: f64,
    pub path: String,
    pub squash: f64,
    pub exploratory: usize,
}

/// Per-epoch training aggregate.
#[derive(Clone, Debug, Default)]
pub struct StepMetrics {
    pub samples: usize,
    pub mean_loss: f64,
    pub mean_reward: f64,
    pub exploratory_fraction: f64,
}

/// Evaluation pass over a dataset with greedy routing.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    pub loss: f64,
    /// Accuracy for classification, mean squared error for regression.
    pub metric: f64,
    /// Action counts per decision slot (depth).
    pub usage: BTreeMap<usize, Vec<usize>>,
    /// Per-sample losses in dataset order.
    pub losses: Vec<f64>,
}

/// Routing network plus the state training carries between samples.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub router: Router,
    pub banks: ModuleBanks,
    pub rewards: RewardConfig,
    pub module_optimizer: OptimizerConfig,
    window: UsageWindow,
    step: usize,
}

fn model_loss(g: &mut Graph, output: NodeId, target: &Target) -> Result<NodeId> {
    match target {
        Target::Class(c) => g.cross_entropy(output, &[*c]),
        Target::Values(v) => g.mse(output, &Tensor::vector(v.clone())?),
    }
}

fn is_correct(output: &Tensor, target: &Target) -> bool {
    matches!(target, Target::Class(c) if argmax(output.data()) == Some(*c))
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, order_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(order_seed));
    order
}

impl Trainer {
    pub fn new(
        router: Router,
        banks: ModuleBanks,
        rewards: RewardConfig,
        module_optimizer: OptimizerConfig,
    ) -> Result<Self> {
        router.validate(&banks)?;
        module_optimizer.validate()?;
        let size = banks.at(0)?.action_space_size();
        rewards.validate(size)?;
        let window = UsageWindow::new(rewards.window_size(size));
        Ok(Trainer {
            router,
            banks,
            rewards,
            module_optimizer,
            window,
            step: 0,
        })
    }

    pub fn window(&self) -> &UsageWindow {
        &self.window
    }

    pub fn module_parameters(&self) -> Vec<Parameter> {
        self.banks.parameters()
    }

    /// Fills per-step regularization rewards from the window as it stood
    /// before this trajectory, then records its module choices.
    fn assign_rewards(&mut self, traj: &mut Trajectory) {
        let t = traj.steps.len();
        let alpha = self.rewards.alpha;
        for step in &mut traj.steps {
            step.reward = if step.action().is_module() {
                reg_reward(&self.rewards, &self.window, step.state.depth, step.decision.index, t)
            } else {
                0.0
            };
            debug_assert!(step.reward.abs() <= alpha.abs() / t as f64 + 1e-15);
        }
        for step in &traj.steps {
            if step.action().is_module() {
                self.window.push(step.state.depth, step.decision.index);
            }
        }
    }

    /// Router losses for one trajectory; tabular learners update in place.
    fn router_losses(&mut self, g: &mut Graph, traj: &Trajectory, differentiable_loss: bool) -> Result<Vec<NodeId>> {
        let intermediate: f64 = traj.steps.iter().map(|s| s.reward).sum();
        let ret = traj.final_reward + intermediate;
        let mut losses = Vec::new();

        // Targets read the values before any of this trajectory's updates.
        let mut next_max = Vec::with_capacity(traj.steps.len());
        for i in 0..traj.steps.len() {
            let value = match traj.steps.get(i + 1) {
                Some(next) if self.router.policy(next.decider).strategy().is_value_based() => Some(
                    self.router
                        .policy(next.decider)
                        .max_value(&next.state, &next.decision.space)?,
                ),
                _ => None,
            };
            next_max.push(value);
        }

        let mut groups: BTreeMap<usize, Vec<&TrajectoryStep>> = BTreeMap::new();
        for (i, step) in traj.steps.iter().enumerate() {
            let Decider::Subrouter(which) = step.decider else {
                unreachable!()
            };
            let policy = self.router.policy_mut(step.decider);
            if policy.strategy().is_value_based() {
                let up = policy.update_value(
                    g,
                    ValueStep {
                        state: &step.state,
                        decision: &step.decision,
                        reward: step.reward,
                        next_max: next_max[i],
                        final_reward: traj.final_reward,
                    },
                )?;
                losses.extend(up.loss);
            } else {
                groups.entry(which).or_default().push(step);
            }
        }

        let gumbel_signal = if differentiable_loss && self.rewards.final_kind == FinalRewardKind::NegativeLoss {
            intermediate
        } else {
            ret
        };
        for (which, steps) in groups {
            let policy = self.router.policy_mut(Decider::Subrouter(which));
            let pairs: Vec<_> = steps.iter().map(|s| (&s.state, &s.decision)).collect();
            let loss = match policy.strategy() {
                Strategy::Gumbel => policy.update_relaxed(g, gumbel_signal, &pairs)?,
                Strategy::Relax => policy.update_relaxed(g, ret, &pairs)?,
                _ => policy.update_pg(g, ret, &pairs)?,
            };
            losses.extend(loss);
        }

        if let Some(step) = &traj.dispatch {
            let policy = self.router.policy_mut(Decider::Dispatcher);
            let pair = [(&step.state, &step.decision)];
            let loss = match policy.strategy() {
                s if s.is_value_based() => {
                    policy
                        .update_value(
                            g,
                            ValueStep {
                                state: &step.state,
                                decision: &step.decision,
                                reward: 0.0,
                                next_max: None,
                                final_reward: ret,
                            },
                        )?
                        .loss
                }
                Strategy::Gumbel | Strategy::Relax => policy.update_relaxed(g, ret, &pair)?,
                _ => policy.update_pg(g, ret, &pair)?,
            };
            losses.extend(loss);
        }
        Ok(losses)
    }

    fn abort(&self, path: &str, err: Error) -> Error {
        if err.is_numeric() {
            Error::NumericAbort {
                step: self.step,
                path: path.to_string(),
                reason: err.to_string(),
            }
        } else {
            err
        }
    }

    /// One training sample: route, score, backpropagate `L + L_RL`
    /// once, then step modules (squashed) and router as `role` allows.
    pub fn train_sample(&mut self, sample: &Sample, role: Role, rng: &mut impl Rng) -> Result<SampleOutcome> {
        let mut g = Graph::new();
        let mut traj = self
            .router
            .route_forward(&mut g, &self.banks, &sample.x, sample.meta, Mode::Train, rng)
            .map_err(|e| self.abort("forward", e))?;
        let path = traj.path();
        let result = self
            .finish_sample(&mut g, &mut traj, sample, role)
            .map_err(|e| self.abort(&path, e));
        self.step += 1;
        result
    }

    fn finish_sample(
        &mut self,
        g: &mut Graph,
        traj: &mut Trajectory,
        sample: &Sample,
        role: Role,
    ) -> Result<SampleOutcome> {
        let loss = model_loss(g, traj.output, &sample.target)?;
        let loss_value = g.value(loss).data()[0];
        traj.final_reward = final_reward(&self.rewards, &traj.output_value, &sample.target, loss_value)?;
        self.assign_rewards(traj);

        let gumbel_router = self
            .router
            .subrouters()
            .iter()
            .chain(self.router.dispatcher())
            .any(|p| p.strategy() == Strategy::Gumbel);
        let use_model_loss = role.module || (role.router && gumbel_router);

        let mut terms = Vec::new();
        if use_model_loss {
            terms.push(loss);
        }
        if role.router {
            terms.extend(self.router_losses(g, traj, use_model_loss)?);
        }
        if let Some((&first, rest)) = terms.split_first() {
            let mut total = first;
            for &t in rest {
                total = g.add(total, t)?;
            }
            g.backward(total)?;
        }

        let t = traj.steps.len().max(1);
        let exploratory = traj.exploratory_count();
        let squash = squash_multiplier(self.rewards.kappa, exploratory, t);
        let modules = self.module_parameters();
        if role.module {
            optimizer_step(&modules, &self.module_optimizer, squash)?;
        } else {
            modules.iter().for_each(Parameter::zero_grad);
        }
        let policies: Vec<_> = self
            .router
            .subrouters()
            .iter()
            .chain(self.router.dispatcher())
            .map(|p| (p.parameters(), p.config().optimizer()))
            .collect();
        for (params, cfg) in policies {
            if role.router {
                optimizer_step(&params, &cfg, 1.0)?;
            } else {
                params.iter().for_each(Parameter::zero_grad);
            }
        }
        Ok(SampleOutcome {
            loss: loss_value,
            final_reward: traj.final_reward,
            path: traj.path(),
            squash,
            exploratory,
        })
    }

    /// Trains on `batch` in order; `roles` gives each sample's split
    /// membership.
    pub fn train_step(&mut self, batch: &[Sample], roles: &[Role], rng: &mut impl Rng) -> Result<StepMetrics> {
        if batch.len() != roles.len() {
            return Err(Error::config("every sample needs a split role"));
        }
        let mut m = StepMetrics::default();
        let mut exploratory = 0;
        let mut decisions = 0;
        for (sample, &role) in batch.iter().zip(roles) {
            let out = self.train_sample(sample, role, rng)?;
            m.samples += 1;
            m.mean_loss += out.loss;
            m.mean_reward += out.final_reward;
            exploratory += out.exploratory;
            decisions += out.path.split('>').filter(|p| *p != "cap").count();
        }
        if m.samples > 0 {
            m.mean_loss /= m.samples as f64;
            m.mean_reward /= m.samples as f64;
            m.exploratory_fraction = exploratory as f64 / decisions.max(1) as f64;
        }
        Ok(m)
    }

    /// One pass over `data` in the order drawn from `order_seed`; routing
    /// randomness comes from `rng` alone.
    pub fn train_epoch(
        &mut self,
        data: &[Sample],
        roles: &[Role],
        order_seed: u64,
        rng: &mut impl Rng,
    ) -> Result<StepMetrics> {
        let order = epoch_order(data.len(), order_seed);
        let batch: Vec<Sample> = order.iter().map(|&i| data[i].clone()).collect();
        let batch_roles: Vec<Role> = order.iter().map(|&i| roles[i]).collect();
        self.train_step(&batch, &batch_roles, rng)
    }

    /// Greedy routing over `data` without any updates.
    pub fn evaluate(&mut self, data: &[Sample]) -> Result<EvalSummary> {
        let mut rng = seeded(0);
        let mut usage: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut losses = Vec::with_capacity(data.len());
        let mut correct = 0usize;
        let mut squared = 0.0;
        for sample in data {
            let mut g = Graph::new();
            let traj = self
                .router
                .route_forward(&mut g, &self.banks, &sample.x, sample.meta, Mode::Eval, &mut rng)?;
            for step in &traj.steps {
                let counts = usage
                    .entry(step.state.depth)
                    .or_insert_with(|| vec![0; step.decision.space.size]);
                counts[step.decision.index] += 1;
            }
            let loss = model_loss(&mut g, traj.output, &sample.target)?;
            let l = g.value(loss).data()[0];
            losses.push(l);
            correct += usize::from(is_correct(&traj.output_value, &sample.target));
            squared += l;
        }
        let n = data.len().max(1) as f64;
        let classification = matches!(data.first().map(|s| &s.target), Some(Target::Class(_)));
        Ok(EvalSummary {
            loss: losses.iter().sum::<f64>() / n,
            metric: if classification {
                correct as f64 / n
            } else {
                squared / n
            },
            usage,
            losses,
        })
    }
}
