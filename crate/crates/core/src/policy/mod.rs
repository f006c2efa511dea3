//! Router decision strategies behind one select/update contract.
//!
//! Value learners (Q, Advantage) are updated per step from Bellman
//! targets; score-function learners (REINFORCE, ε-greedy with importance
//! sampling, WPL) from the trajectory return; relaxed learners (Gumbel,
//! RELAX) from relaxed samples recorded at selection time.

mod relax;
mod types;
mod wpl;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::distr::Open01;
use rand::Rng;

pub use relax::{
    gumbel, hard_sample, log_softmax, relax_estimate, relaxed_sample, softmax, ControlVariate, CvGradient,
    RelaxEstimate,
};
pub use types::{argmax, ActionSpace, Decision, Mode, RelaxedSample, RoutingAction, RoutingState};
pub use wpl::{project_to_simplex, PROBABILITY_FLOOR};

use crate::error::{Error, Result};
use crate::nn::{Activation, Graph, Mlp, NodeId, OptimizerConfig, Parameter, Tensor};
use crate::rng::{derive_seed, seeded};
use wpl::WplEntry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    QLearning,
    Advantage,
    Reinforce,
    EpsilonGreedyIs,
    Wpl,
    Gumbel,
    Relax,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::QLearning,
        Strategy::Advantage,
        Strategy::Reinforce,
        Strategy::EpsilonGreedyIs,
        Strategy::Wpl,
        Strategy::Gumbel,
        Strategy::Relax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::QLearning => "q-learning",
            Strategy::Advantage => "advantage",
            Strategy::Reinforce => "reinforce",
            Strategy::EpsilonGreedyIs => "epsilon-greedy-is",
            Strategy::Wpl => "wpl",
            Strategy::Gumbel => "gumbel",
            Strategy::Relax => "relax",
        }
    }

    pub fn is_value_based(self) -> bool {
        matches!(self, Strategy::QLearning | Strategy::Advantage)
    }

    pub fn is_score_function(self) -> bool {
        matches!(self, Strategy::Reinforce | Strategy::EpsilonGreedyIs | Strategy::Wpl)
    }

    pub fn is_relaxed(self) -> bool {
        matches!(self, Strategy::Gumbel | Strategy::Relax)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Approximator {
    /// One entry per `(meta, depth)`.
    Tabular,
    /// MLP on `[activation, one-hot meta, one-hot depth]`.
    Neural { hidden: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub strategy: Strategy,
    pub approximator: Approximator,
    pub lr: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub baseline_decay: f64,
    /// Fixed at 1; kept so a config that says otherwise is rejected.
    pub gamma: f64,
    /// Size of the full action space the policy scores.
    pub action_count: usize,
    /// Activation width fed to neural approximators (0: none).
    pub input_dim: usize,
    /// Number of meta labels one-hot encoded for neural approximators.
    pub meta_count: usize,
    pub max_depth: usize,
    pub control_variate_lr: f64,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(strategy: Strategy, approximator: Approximator, action_count: usize) -> Self {
        PolicyConfig {
            strategy,
            approximator,
            lr: 0.01,
            epsilon: 0.05,
            tau: 0.5,
            baseline_decay: 0.1,
            gamma: 1.0,
            action_count,
            input_dim: 0,
            meta_count: 0,
            max_depth: 1,
            control_variate_lr: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(self.gamma == 1.0, format!("discount must be 1, got {}", self.gamma))?;
        check(
            self.tau > 0.0,
            format!("temperature must be positive, got {}", self.tau),
        )?;
        check(
            self.lr > 0.0,
            format!("router learning rate must be positive, got {}", self.lr),
        )?;
        check(
            self.control_variate_lr > 0.0,
            format!(
                "control-variate learning rate must be positive, got {}",
                self.control_variate_lr
            ),
        )?;
        check(
            (0.0..=1.0).contains(&self.epsilon),
            format!("epsilon must lie in [0, 1], got {}", self.epsilon),
        )?;
        check(
            (0.0..=1.0).contains(&self.baseline_decay),
            format!("baseline decay must lie in [0, 1], got {}", self.baseline_decay),
        )?;
        check(self.action_count > 0, "policy needs at least one action".into())?;
        check(self.max_depth > 0, "max depth must be positive".into())?;
        if let Approximator::Neural { hidden } = self.approximator {
            check(hidden > 0, "neural router hidden width must be positive".into())?;
            check(
                self.strategy != Strategy::Wpl,
                "wpl is defined over explicit probability tables; use a tabular approximator".into(),
            )?;
        }
        if self.strategy == Strategy::Wpl {
            check(
                PROBABILITY_FLOOR * self.action_count as f64 <= 1.0,
                "too many actions for the wpl probability floor".into(),
            )?;
        }
        Ok(())
    }

    fn encoding_dim(&self) -> usize {
        self.input_dim + self.meta_count + self.max_depth + 1
    }

    /// Plain SGD at the router learning rate, for parameters on the tape.
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig::sgd(self.lr)
    }
}

type Key = (usize, usize);

#[derive(Clone, Debug)]
enum Model {
    QTable(BTreeMap<Key, Vec<f64>>),
    /// Action values and state value per key.
    AdvantageTable(BTreeMap<Key, (Vec<f64>, f64)>),
    Logits(BTreeMap<Key, Parameter>),
    Wpl(BTreeMap<Key, WplEntry>),
    Net(Mlp),
    /// Fixed action index per depth; never learns.
    Scripted(Vec<usize>),
}

/// Outcome of one value update.
#[derive(Clone, Copy, Debug)]
pub struct ValueUpdate {
    /// Squared Bellman error before the update.
    pub squared_error: f64,
    /// Loss on the tape for neural approximators.
    pub loss: Option<NodeId>,
}

/// One transition for value learning. `next_max` is `max_a' Q(s′, a′)`
/// for non-terminal steps and `None` at the end of the trajectory, where
/// the final reward closes the target.
#[derive(Clone, Copy, Debug)]
pub struct ValueStep<'a> {
    pub state: &'a RoutingState,
    pub decision: &'a Decision,
    pub reward: f64,
    pub next_max: Option<f64>,
    pub final_reward: f64,
}

impl ValueStep<'_> {
    pub fn target(&self) -> f64 {
        self.reward + self.next_max.unwrap_or(self.final_reward)
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    model: Model,
    baseline: f64,
    control_variates: BTreeMap<Vec<usize>, ControlVariate>,
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let model = match (config.approximator, config.strategy) {
            (Approximator::Neural { hidden }, strategy) => {
                let outputs = config.action_count + usize::from(strategy == Strategy::Advantage);
                let mut rng = seeded(derive_seed(config.seed, &[0x70_6f_6c]));
                Model::Net(Mlp::new(
                    "router",
                    &[config.encoding_dim(), hidden, outputs],
                    Activation::Tanh,
                    &mut rng,
                ))
            }
            (Approximator::Tabular, Strategy::QLearning) => Model::QTable(BTreeMap::new()),
            (Approximator::Tabular, Strategy::Advantage) => Model::AdvantageTable(BTreeMap::new()),
            (Approximator::Tabular, Strategy::Wpl) => Model::Wpl(BTreeMap::new()),
            (Approximator::Tabular, _) => Model::Logits(BTreeMap::new()),
        };
        Ok(Policy {
            config,
            model,
            baseline: 0.0,
            control_variates: BTreeMap::new(),
        })
    }

    /// A frozen policy that picks `indices[depth]` (the last entry past the
    /// end). Used to replay fixed paths.
    pub fn scripted(action_count: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::config("scripted policy needs at least one action"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= action_count) {
            return Err(Error::ActionOutOfRange {
                index: bad,
                size: action_count,
            });
        }
        let mut config = PolicyConfig::new(Strategy::QLearning, Approximator::Tabular, action_count);
        config.epsilon = 0.0;
        Ok(Policy {
            config,
            model: Model::Scripted(indices),
            baseline: 0.0,
            control_variates: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.config.strategy
    }

    pub fn is_frozen(&self) -> bool {
        matches!(self.model, Model::Scripted(_))
    }

    /// Running reward baseline of the score-function and Gumbel learners.
    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Parameters that live on the tape and are stepped by the trainer.
    pub fn parameters(&self) -> Vec<Parameter> {
        match &self.model {
            Model::Logits(map) => map.values().cloned().collect(),
            Model::Net(net) => net.parameters(),
            _ => Vec::new(),
        }
    }

    fn key(&self, state: &RoutingState) -> Result<Key> {
        let meta = state.meta.ok_or(Error::MissingMeta)?;
        Ok((meta, state.depth))
    }

    fn encode(&self, state: &RoutingState) -> Result<Tensor> {
        let c = &self.config;
        let mut x = Vec::with_capacity(c.encoding_dim());
        if c.input_dim > 0 {
            let h = state
                .activation
                .as_ref()
                .ok_or_else(|| Error::config("neural router needs the activation in its state"))?;
            if h.len() != c.input_dim {
                return Err(Error::Dimension {
                    expected: c.input_dim,
                    got: h.len(),
                });
            }
            x.extend_from_slice(h.data());
        }
        let mut meta = vec![0.0; c.meta_count];
        if let Some(m) = state.meta {
            if c.meta_count > 0 {
                *meta.get_mut(m).ok_or(Error::UnknownMeta(m))? = 1.0;
            }
        }
        x.extend(meta);
        let mut depth = vec![0.0; c.max_depth + 1];
        depth[state.depth.min(c.max_depth)] = 1.0;
        x.extend(depth);
        Tensor::vector(x)
    }

    fn check_space(&self, space: &ActionSpace) -> Result<()> {
        if space.size != self.config.action_count {
            return Err(Error::Dimension {
                expected: self.config.action_count,
                got: space.size,
            });
        }
        if space.allowed.is_empty() || space.allowed.len() != space.actions.len() {
            return Err(Error::config("action space has no allowed actions"));
        }
        if let Some(&index) = space.allowed.iter().find(|&&i| i >= space.size) {
            return Err(Error::ActionOutOfRange {
                index,
                size: space.size,
            });
        }
        Ok(())
    }

    /// Network output for `state` on the tape.
    fn net_output(&self, g: &mut Graph, net: &Mlp, state: &RoutingState) -> Result<NodeId> {
        let x = g.constant(self.encode(state)?);
        net.forward(g, x)
    }

    /// Logits over the allowed actions, on the tape.
    fn logits(&mut self, g: &mut Graph, state: &RoutingState, space: &ActionSpace) -> Result<NodeId> {
        let size = self.config.action_count;
        let key = match &self.model {
            Model::Logits(_) => Some(self.key(state)?),
            _ => None,
        };
        let full = match &mut self.model {
            Model::Logits(map) => {
                let key = key.expect("tabular key");
                let p = map.entry(key).or_insert_with(|| {
                    Parameter::new(
                        format!("router.logits[{},{}]", key.0, key.1),
                        Tensor::zeros(&[size]).expect("positive size"),
                    )
                });
                g.param(p)
            }
            Model::Net(net) => {
                let net = net.clone();
                self.net_output(g, &net, state)?
            }
            _ => unreachable!("logits requested from a non-logit model"),
        };
        g.gather(full, &space.allowed)
    }

    /// Action values over the allowed actions (advantages for the
    /// advantage learner), plus tape nodes for neural approximators.
    fn action_values(
        &self,
        g: Option<&mut Graph>,
        state: &RoutingState,
        space: &ActionSpace,
    ) -> Result<(Vec<f64>, Option<NodeId>, Option<NodeId>)> {
        let gather = |row: &[f64]| space.allowed.iter().map(|&i| row[i]).collect::<Vec<_>>();
        match &self.model {
            Model::QTable(map) => {
                let key = self.key(state)?;
                Ok((
                    map.get(&key)
                        .map_or_else(|| vec![0.0; space.allowed.len()], |q| gather(q)),
                    None,
                    None,
                ))
            }
            Model::AdvantageTable(map) => {
                let key = self.key(state)?;
                let values = match map.get(&key) {
                    Some((q, v)) => gather(q).into_iter().map(|qi| qi - v).collect(),
                    None => vec![0.0; space.allowed.len()],
                };
                Ok((values, None, None))
            }
            Model::Net(net) => {
                let size = self.config.action_count;
                let advantage = self.config.strategy == Strategy::Advantage;
                match g {
                    Some(g) => {
                        let out = self.net_output(g, net, state)?;
                        let q = g.gather(out, &space.allowed)?;
                        let v = if advantage { Some(g.gather(out, &[size])?) } else { None };
                        let mut values = g.value(q).data().to_vec();
                        if let Some(v) = v {
                            let v = g.value(v).data()[0];
                            values.iter_mut().for_each(|x| *x -= v);
                        }
                        Ok((values, Some(q), v))
                    }
                    None => {
                        let out = net.eval(&self.encode(state)?)?;
                        let mut values = gather(out.data());
                        if advantage {
                            values.iter_mut().for_each(|x| *x -= out.data()[size]);
                        }
                        Ok((values, None, None))
                    }
                }
            }
            _ => unreachable!("action values requested from a non-value model"),
        }
    }

    /// `max_a Q(s, a)` over the allowed actions, off the tape. For the
    /// advantage learner this is `V(s) + max_a A(s, a)`.
    pub fn max_value(&self, state: &RoutingState, space: &ActionSpace) -> Result<f64> {
        self.check_space(space)?;
        let best = |q: &[f64]| space.allowed.iter().map(|&i| q[i]).fold(f64::NEG_INFINITY, f64::max);
        match &self.model {
            Model::QTable(map) => Ok(map.get(&self.key(state)?).map_or(0.0, |q| best(q))),
            Model::AdvantageTable(map) => Ok(map.get(&self.key(state)?).map_or(0.0, |(q, _)| best(q))),
            Model::Net(net) if self.config.strategy.is_value_based() => {
                Ok(best(net.eval(&self.encode(state)?)?.data()))
            }
            _ => Err(Error::config(format!("{} has no action values", self.config.strategy))),
        }
    }

    /// Chooses an action in `space` for `state`. In training mode the
    /// decision records what the strategy's update needs; tape nodes are
    /// added to `g`.
    pub fn select(
        &mut self,
        g: &mut Graph,
        state: &RoutingState,
        space: &ActionSpace,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Decision> {
        self.check_space(space)?;
        let n = space.allowed.len();
        if let Model::Scripted(indices) = &self.model {
            let index = indices[state.depth.min(indices.len() - 1)];
            let pos = space.position(index).ok_or_else(|| {
                Error::config(format!(
                    "scripted action {index} is not allowed at depth {}",
                    state.depth
                ))
            })?;
            return Ok(Decision::simple(pos, true, space.clone()));
        }

        let strategy = self.config.strategy;
        if strategy.is_value_based() {
            let explore = mode == Mode::Train && rng.random::<f64>() < self.config.epsilon;
            let (values, q, v) = self.action_values(Some(g), state, space)?;
            let (pos, greedy) = if explore {
                (rng.random_range(0..n), false)
            } else {
                (argmax(&values).expect("nonempty"), true)
            };
            let mut d = Decision::simple(pos, greedy, space.clone());
            d.logits = q;
            d.value = v;
            return Ok(d);
        }

        if strategy == Strategy::Wpl {
            let key = self.key(state)?;
            let Model::Wpl(map) = &mut self.model else {
                unreachable!()
            };
            let entry = map.entry(key).or_insert_with(|| WplEntry::new(space.allowed.clone()));
            if entry.allowed != space.allowed {
                return Err(Error::config(format!(
                    "wpl state {key:?} seen with a different action set"
                )));
            }
            let probs = entry.probs.clone();
            let pos = match mode {
                Mode::Train => sample_index(&probs, rng),
                Mode::Eval => argmax(&probs).expect("nonempty"),
            };
            let mut d = Decision::simple(pos, true, space.clone());
            d.probs = Some(probs);
            return Ok(d);
        }

        let logits = self.logits(g, state, space)?;
        let logit_values = g.value(logits).data().to_vec();
        let log_probs = g.log_softmax(logits)?;
        let probs: Vec<f64> = g.value(log_probs).data().iter().map(|l| l.exp()).collect();
        let best = argmax(&logit_values).expect("nonempty");

        if mode == Mode::Eval {
            let mut d = Decision::simple(best, true, space.clone());
            d.probs = Some(probs);
            d.logits = Some(logits);
            return Ok(d);
        }

        let mut d = match strategy {
            Strategy::Reinforce => Decision::simple(sample_index(&probs, rng), true, space.clone()),
            Strategy::EpsilonGreedyIs => {
                let take_best = rng.random::<f64>() < self.config.epsilon;
                let pos = if take_best { best } else { sample_index(&probs, rng) };
                let eps = self.config.epsilon;
                let mu = eps * f64::from(u8::from(pos == best)) + (1.0 - eps) * probs[pos];
                if mu <= 0.0 {
                    return Err(Error::NonFinite {
                        op: "importance weight".into(),
                    });
                }
                let mut d = Decision::simple(pos, take_best || pos == best, space.clone());
                d.importance_weight = Some(probs[pos] / mu);
                d
            }
            Strategy::Gumbel | Strategy::Relax => {
                let uniforms: Vec<f64> = (0..n).map(|_| rng.sample(Open01)).collect();
                let pos = hard_sample(&logit_values, &uniforms);
                let mut relaxed = RelaxedSample {
                    sample: relaxed_sample(&logit_values, &uniforms, self.config.tau),
                    uniforms,
                    conditional_uniforms: Vec::new(),
                    hard_weight: None,
                };
                let mut d = Decision::simple(pos, true, space.clone());
                if strategy == Strategy::Gumbel {
                    let noise = Tensor::vector(relaxed.uniforms.iter().map(|&u| gumbel(u)).collect())?;
                    let noise = g.constant(noise);
                    let z = g.add(logits, noise)?;
                    let z = g.scale(z, 1.0 / self.config.tau)?;
                    let y = g.softmax(z)?;
                    let weight = g.gather(y, &[pos])?;
                    relaxed.hard_weight = Some(weight);
                    d.gate = Some(g.straight_through(weight)?);
                } else {
                    relaxed.conditional_uniforms = (0..n).map(|_| rng.sample(Open01)).collect();
                }
                d.relaxed = Some(relaxed);
                d
            }
            _ => unreachable!(),
        };
        d.probs = Some(probs);
        d.logits = Some(logits);
        d.log_prob = Some(g.gather(log_probs, &[d.position()])?);
        Ok(d)
    }

    /// Bellman update for Q and Advantage learners. Tabular entries move by
    /// `lr·(target − estimate)` here; neural learners return the squared
    /// error on the tape.
    pub fn update_value(&mut self, g: &mut Graph, step: ValueStep<'_>) -> Result<ValueUpdate> {
        if self.is_frozen() {
            return Ok(ValueUpdate {
                squared_error: 0.0,
                loss: None,
            });
        }
        if !self.config.strategy.is_value_based() {
            return Err(Error::config(format!(
                "{} is not a value learner",
                self.config.strategy
            )));
        }
        let target = step.target();
        let lr = self.config.lr;
        let size = self.config.action_count;
        let index = step.decision.index;
        let key = match &self.model {
            Model::Net(_) => None,
            _ => Some(self.key(step.state)?),
        };
        match &mut self.model {
            Model::QTable(map) => {
                let q = map.entry(key.expect("tabular")).or_insert_with(|| vec![0.0; size]);
                let err = target - q[index];
                q[index] += lr * err;
                Ok(ValueUpdate {
                    squared_error: err * err,
                    loss: None,
                })
            }
            Model::AdvantageTable(map) => {
                let (q, v) = map
                    .entry(key.expect("tabular"))
                    .or_insert_with(|| (vec![0.0; size], 0.0));
                let err = target - q[index];
                q[index] += lr * err;
                *v += lr * (target - *v);
                Ok(ValueUpdate {
                    squared_error: err * err,
                    loss: None,
                })
            }
            Model::Net(_) => {
                let q = step
                    .decision
                    .logits
                    .ok_or_else(|| Error::config("decision carries no action values"))?;
                let qa = g.gather(q, &[step.decision.position()])?;
                let err = target - g.value(qa).data()[0];
                let t = Tensor::scalar(target)?;
                let mut loss = g.mse(qa, &t)?;
                if let Some(v) = step.decision.value {
                    let lv = g.mse(v, &t)?;
                    loss = g.add(loss, lv)?;
                }
                Ok(ValueUpdate {
                    squared_error: err * err,
                    loss: Some(loss),
                })
            }
            _ => unreachable!(),
        }
    }

    fn advance_baseline(&mut self, ret: f64) {
        let a = self.config.baseline_decay;
        self.baseline = (1.0 - a) * self.baseline + a * ret;
    }

    /// Score-function update from the trajectory return. REINFORCE and
    /// ε-greedy-IS return `−(G − b)·Σ w·log π(a)` on the tape and then move
    /// the baseline; WPL updates its tables directly.
    pub fn update_pg(
        &mut self,
        g: &mut Graph,
        ret: f64,
        steps: &[(&RoutingState, &Decision)],
    ) -> Result<Option<NodeId>> {
        if self.is_frozen() || steps.is_empty() {
            return Ok(None);
        }
        match self.config.strategy {
            Strategy::Wpl => {
                let lr = self.config.lr;
                for (state, d) in steps {
                    let key = self.key(state)?;
                    let Model::Wpl(map) = &mut self.model else {
                        unreachable!()
                    };
                    let entry = map
                        .get_mut(&key)
                        .ok_or_else(|| Error::config(format!("wpl update for unseen state {key:?}")))?;
                    entry.update(d.position(), ret, lr);
                }
                Ok(None)
            }
            Strategy::Reinforce | Strategy::EpsilonGreedyIs => {
                let advantage = ret - self.baseline;
                let mut total: Option<NodeId> = None;
                for (_, d) in steps {
                    let lp = d
                        .log_prob
                        .ok_or_else(|| Error::config("decision carries no log-probability"))?;
                    let w = d.importance_weight.unwrap_or(1.0);
                    let term = g.scale(lp, -advantage * w)?;
                    total = Some(match total {
                        Some(t) => g.add(t, term)?,
                        None => term,
                    });
                }
                self.advance_baseline(ret);
                Ok(total)
            }
            other => Err(Error::config(format!("{other} is not a score-function learner"))),
        }
    }

    /// Update for relaxed learners.
    ///
    /// Gumbel: the differentiable part of the objective already reaches the
    /// logits through the straight-through gates; `signal` is the remaining
    /// reward, pushed through the relaxed weight of each chosen action as
    /// `−(signal − b)·z_a`.
    ///
    /// RELAX: `signal` is the return `f(b)`; the estimate `ĝ` enters as the
    /// surrogate `−ĝ·logits` and the control variate takes one descent step
    /// on `‖ĝ‖²`.
    pub fn update_relaxed(
        &mut self,
        g: &mut Graph,
        signal: f64,
        steps: &[(&RoutingState, &Decision)],
    ) -> Result<Option<NodeId>> {
        if self.is_frozen() || steps.is_empty() {
            return Ok(None);
        }
        let tau = self.config.tau;
        if tau <= 0.0 {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let mut total: Option<NodeId> = None;
        let strategy = self.config.strategy;
        let advantage = signal - self.baseline;
        for (_, d) in steps {
            let relaxed = d
                .relaxed
                .as_ref()
                .ok_or_else(|| Error::config("decision carries no relaxed sample"))?;
            let term = match strategy {
                Strategy::Gumbel => {
                    let w = relaxed
                        .hard_weight
                        .ok_or_else(|| Error::config("gumbel decision without relaxed weight"))?;
                    g.scale(w, -advantage)?
                }
                Strategy::Relax => {
                    let logits = d.logits.ok_or_else(|| Error::config("decision carries no logits"))?;
                    let logit_values = g.value(logits).data().to_vec();
                    let k = logit_values.len();
                    let seed = derive_seed(self.config.seed, &[0x63_76, d.space.allowed.len() as u64]);
                    let cv = self
                        .control_variates
                        .entry(d.space.allowed.clone())
                        .or_insert_with(|| ControlVariate::new(k, ControlVariate::DEFAULT_HIDDEN, &mut seeded(seed)));
                    let est = relax_estimate(
                        &logit_values,
                        d.position(),
                        &relaxed.uniforms,
                        &relaxed.conditional_uniforms,
                        tau,
                        signal,
                        cv,
                    )?;
                    cv.descend(&est.variance_gradient, self.config.control_variate_lr);
                    let ghat = g.constant(Tensor::vector(est.gradient)?);
                    let prod = g.mul(logits, ghat)?;
                    let s = g.sum(prod)?;
                    g.scale(s, -1.0)?
                }
                other => return Err(Error::config(format!("{other} is not a relaxed learner"))),
            };
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        if strategy == Strategy::Gumbel {
            self.advance_baseline(signal);
        }
        Ok(total)
    }
}
