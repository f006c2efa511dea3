//! The routing forward pass: select, apply, repeat until termination.

use rand::Rng;

use crate::bank::ModuleBank;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId, Tensor};
use crate::policy::{ActionSpace, Decision, Mode, Policy, RoutingAction, RoutingState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterKind {
    /// One policy decides at every depth.
    Single,
    /// Policy `i` decides at depth `i` only.
    PerDecision,
    /// A dispatcher assigns the sample to one of several single routers.
    Dispatched,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DispatchMode {
    /// Meta label `m` goes to subrouter `m`.
    ByMeta,
    /// A dispatcher policy chooses from the input.
    ByInput,
}

/// Equal-width bins over the first input coordinate, used as the state
/// label when samples carry no meta information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputBuckets {
    pub count: usize,
    pub low: f64,
    pub high: f64,
}

impl InputBuckets {
    pub fn bucket(&self, x: f64) -> usize {
        let t = (x - self.low) / (self.high - self.low);
        ((t * self.count as f64).floor().max(0.0) as usize).min(self.count - 1)
    }
}

/// Banks available at each depth: one shared bank, or one per depth.
#[derive(Clone, Debug)]
pub struct ModuleBanks {
    banks: Vec<ModuleBank>,
    shared: bool,
}

impl ModuleBanks {
    pub fn shared(bank: ModuleBank) -> Self {
        ModuleBanks {
            banks: vec![bank],
            shared: true,
        }
    }

    pub fn per_depth(banks: Vec<ModuleBank>) -> Self {
        ModuleBanks { banks, shared: false }
    }

    pub fn at(&self, depth: usize) -> Result<&ModuleBank> {
        let i = if self.shared { 0 } else { depth };
        self.banks.get(i).ok_or(Error::EmptyBank(depth))
    }

    pub fn all(&self) -> &[ModuleBank] {
        &self.banks
    }

    pub fn parameters(&self) -> Vec<crate::nn::Parameter> {
        self.banks.iter().flat_map(ModuleBank::parameters).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decider {
    Subrouter(usize),
    Dispatcher,
}

#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    pub state: RoutingState,
    pub decision: Decision,
    pub decider: Decider,
    /// Filled in by the reward assembly.
    pub reward: f64,
    /// `None` after termination.
    pub next: Option<RoutingState>,
}

impl TrajectoryStep {
    pub fn action(&self) -> RoutingAction {
        self.decision.action
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// The dispatcher's choice, for by-input dispatched routers.
    pub dispatch: Option<TrajectoryStep>,
    pub steps: Vec<TrajectoryStep>,
    /// Set when the depth cap ended routing instead of a terminate action.
    pub forced_stop: bool,
    pub output: NodeId,
    pub output_value: Tensor,
    /// Filled in by the reward assembly.
    pub final_reward: f64,
}

impl Trajectory {
    pub fn actions(&self) -> Vec<RoutingAction> {
        self.steps.iter().map(TrajectoryStep::action).collect()
    }

    /// Compact path label such as `m0>m2>stop`.
    pub fn path(&self) -> String {
        let mut parts: Vec<String> = self.actions().iter().map(ToString::to_string).collect();
        if self.forced_stop {
            parts.push("cap".into());
        }
        parts.join(">")
    }

    pub fn exploratory_count(&self) -> usize {
        self.steps.iter().filter(|s| !s.decision.greedy).count()
    }
}

#[derive(Clone, Debug)]
pub struct Router {
    kind: RouterKind,
    max_depth: usize,
    subrouters: Vec<Policy>,
    dispatch_mode: Option<DispatchMode>,
    dispatcher: Option<Policy>,
    buckets: Option<InputBuckets>,
}

impl Router {
    pub fn single(policy: Policy, max_depth: usize) -> Result<Self> {
        Router::build(RouterKind::Single, max_depth, vec![policy], None, None)
    }

    pub fn per_decision(policies: Vec<Policy>) -> Result<Self> {
        let depth = policies.len();
        Router::build(RouterKind::PerDecision, depth, policies, None, None)
    }

    pub fn dispatched_by_meta(subrouters: Vec<Policy>, max_depth: usize) -> Result<Self> {
        Router::build(
            RouterKind::Dispatched,
            max_depth,
            subrouters,
            Some(DispatchMode::ByMeta),
            None,
        )
    }

    pub fn dispatched_by_input(dispatcher: Policy, subrouters: Vec<Policy>, max_depth: usize) -> Result<Self> {
        if dispatcher.config().action_count != subrouters.len() {
            return Err(Error::config(format!(
                "dispatcher scores {} actions for {} subrouters",
                dispatcher.config().action_count,
                subrouters.len()
            )));
        }
        Router::build(
            RouterKind::Dispatched,
            max_depth,
            subrouters,
            Some(DispatchMode::ByInput),
            Some(dispatcher),
        )
    }

    fn build(
        kind: RouterKind,
        max_depth: usize,
        subrouters: Vec<Policy>,
        dispatch_mode: Option<DispatchMode>,
        dispatcher: Option<Policy>,
    ) -> Result<Self> {
        if max_depth == 0 {
            return Err(Error::config("max depth must be positive"));
        }
        if subrouters.is_empty() {
            return Err(Error::config("router needs at least one policy"));
        }
        Ok(Router {
            kind,
            max_depth,
            subrouters,
            dispatch_mode,
            dispatcher,
            buckets: None,
        })
    }

    /// Labels meta-less samples by the bucket of their first input value.
    pub fn with_input_buckets(mut self, buckets: InputBuckets) -> Result<Self> {
        if buckets.count == 0 || !(buckets.high > buckets.low) {
            return Err(Error::config(
                "input buckets need a positive count and a nonempty range",
            ));
        }
        self.buckets = Some(buckets);
        Ok(self)
    }

    pub fn kind(&self) -> RouterKind {
        self.kind
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn subrouters(&self) -> &[Policy] {
        &self.subrouters
    }

    pub fn subrouters_mut(&mut self) -> &mut [Policy] {
        &mut self.subrouters
    }

    pub fn dispatcher(&self) -> Option<&Policy> {
        self.dispatcher.as_ref()
    }

    pub fn dispatcher_mut(&mut self) -> Option<&mut Policy> {
        self.dispatcher.as_mut()
    }

    pub fn policy(&self, decider: Decider) -> &Policy {
        match decider {
            Decider::Subrouter(i) => &self.subrouters[i],
            Decider::Dispatcher => self.dispatcher.as_ref().expect("router has a dispatcher"),
        }
    }

    pub fn policy_mut(&mut self, decider: Decider) -> &mut Policy {
        match decider {
            Decider::Subrouter(i) => &mut self.subrouters[i],
            Decider::Dispatcher => self.dispatcher.as_mut().expect("router has a dispatcher"),
        }
    }

    /// Router parameters that live on the tape.
    pub fn parameters(&self) -> Vec<crate::nn::Parameter> {
        self.subrouters
            .iter()
            .chain(self.dispatcher.as_ref())
            .flat_map(Policy::parameters)
            .collect()
    }

    /// Checks the banks against the depth cap and the policies.
    pub fn validate(&self, banks: &ModuleBanks) -> Result<()> {
        for depth in 0..self.max_depth {
            let bank = banks.at(depth)?;
            if self.max_depth > 1 && bank.in_dim() != bank.out_dim() {
                return Err(Error::config(format!(
                    "routing deeper than 1 needs width-preserving modules, got {}→{}",
                    bank.in_dim(),
                    bank.out_dim()
                )));
            }
            let policy = match self.kind {
                RouterKind::PerDecision => &self.subrouters[depth],
                _ => &self.subrouters[0],
            };
            if policy.config().action_count != bank.action_space_size() {
                return Err(Error::Dimension {
                    expected: bank.action_space_size(),
                    got: policy.config().action_count,
                });
            }
        }
        Ok(())
    }

    /// Legal actions at `depth`. Terminating before any module is forbidden
    /// except for per-decision routers, whose subrouters may stop anywhere.
    pub fn action_space(&self, bank: &ModuleBank, depth: usize) -> ActionSpace {
        let size = bank.action_space_size();
        let mut allowed = Vec::with_capacity(size);
        let mut actions = Vec::with_capacity(size);
        for i in 0..size {
            let a = bank.action_at(i).expect("index within action space");
            if a == RoutingAction::Terminate && depth == 0 && self.kind != RouterKind::PerDecision {
                continue;
            }
            allowed.push(i);
            actions.push(a);
        }
        ActionSpace { size, allowed, actions }
    }

    fn subrouter_for(&self, depth: usize, assigned: usize) -> usize {
        match self.kind {
            RouterKind::PerDecision => depth,
            RouterKind::Single => 0,
            RouterKind::Dispatched => assigned,
        }
    }

    /// Meta label seen by the policies: the sample's own, else its input
    /// bucket when configured.
    fn effective_meta(&self, x: &Tensor, meta: Option<usize>) -> Option<usize> {
        meta.or_else(|| self.buckets.map(|b| b.bucket(x.data()[0])))
    }

    /// Picks the subrouter for a dispatched router.
    pub fn dispatch(
        &mut self,
        g: &mut Graph,
        state: &RoutingState,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<(usize, Option<Decision>)> {
        let k = self.subrouters.len();
        match self.dispatch_mode {
            None => Err(Error::config("dispatch on a router that is not dispatched")),
            Some(_) if k == 1 => Ok((0, None)),
            Some(DispatchMode::ByMeta) => {
                let m = state.meta.ok_or(Error::MissingMeta)?;
                if m >= k {
                    return Err(Error::UnknownMeta(m));
                }
                Ok((m, None))
            }
            Some(DispatchMode::ByInput) => {
                let dispatcher = self.dispatcher.as_mut().expect("by-input router has a dispatcher");
                let d = dispatcher.select(g, state, &ActionSpace::full(k), mode, rng)?;
                Ok((d.index, Some(d)))
            }
        }
    }

    /// Routes `x` through the banks, recording every decision. The output
    /// node is connected to the module parameters on `g`.
    pub fn route_forward(
        &mut self,
        g: &mut Graph,
        banks: &ModuleBanks,
        x: &Tensor,
        meta: Option<usize>,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Trajectory> {
        let meta = self.effective_meta(x, meta);
        let mut h = g.constant(x.clone());
        let mut state = RoutingState::new(Some(x.clone()), meta, 0);

        let mut dispatch = None;
        let mut assigned = 0;
        if self.kind == RouterKind::Dispatched {
            let (index, decision) = self.dispatch(g, &state, mode, rng)?;
            assigned = index;
            dispatch = decision.map(|decision| TrajectoryStep {
                state: state.clone(),
                decision,
                decider: Decider::Dispatcher,
                reward: 0.0,
                next: Some(state.clone()),
            });
        }

        let mut steps = Vec::new();
        let mut forced_stop = true;
        while state.depth < self.max_depth {
            let bank = banks.at(state.depth)?;
            let space = self.action_space(bank, state.depth);
            let which = self.subrouter_for(state.depth, assigned);
            let decision = self.subrouters[which].select(g, &state, &space, mode, rng)?;

            let (next_h, next) = match decision.action {
                RoutingAction::Terminate => (h, None),
                RoutingAction::Skip => (h, Some(state.depth + 1)),
                a @ RoutingAction::Module(_) => (bank.apply(g, a, h)?, Some(state.depth + 1)),
            };
            h = match decision.gate {
                Some(gate) => g.scale_by(next_h, gate)?,
                None => next_h,
            };
            let next_state = next.map(|depth| RoutingState::new(Some(g.value(h).clone()), meta, depth));
            steps.push(TrajectoryStep {
                state: state.clone(),
                decision,
                decider: Decider::Subrouter(which),
                reward: 0.0,
                next: next_state.clone(),
            });
            match next_state {
                Some(s) => state = s,
                None => {
                    forced_stop = false;
                    break;
                }
            }
        }

        Ok(Trajectory {
            dispatch,
            steps,
            forced_stop,
            output: h,
            output_value: g.value(h).clone(),
            final_reward: 0.0,
        })
    }
}

/// The deterministic state transition for a non-terminating action.
pub fn transition(state: &RoutingState, action: RoutingAction, banks: &ModuleBanks) -> Result<RoutingState> {
    let h = state
        .activation
        .as_ref()
        .ok_or_else(|| Error::config("transition needs an activation"))?;
    let activation = match action {
        RoutingAction::Terminate => return Err(Error::config("terminate ends routing; there is no next state")),
        RoutingAction::Skip => h.clone(),
        RoutingAction::Module(_) => {
            let mut g = Graph::new();
            let x = g.constant(h.clone());
            let y = banks.at(state.depth)?.apply(&mut g, action, x)?;
            g.value(y).clone()
        }
    };
    Ok(RoutingState::new(Some(activation), state.meta, state.depth + 1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BankSpec, Init};
    use crate::policy::{Approximator, PolicyConfig, Strategy};
    use crate::rng::seeded;

    const SLOPES: [f64; 3] = [3.0, 0.1, 0.8];

    fn bank(termination: bool, skip: bool) -> ModuleBank {
        ModuleBank::build(&BankSpec {
            init: Init::Slopes(SLOPES.to_vec()),
            allow_termination: termination,
            allow_skip: skip,
            ..BankSpec::scalar(3, 0)
        })
        .unwrap()
    }

    fn run(router: &mut Router, banks: &ModuleBanks, x: f64, meta: Option<usize>) -> Trajectory {
        let mut g = Graph::new();
        router
            .route_forward(
                &mut g,
                banks,
                &Tensor::vector(vec![x]).unwrap(),
                meta,
                Mode::Train,
                &mut seeded(0),
            )
            .unwrap()
    }

    #[test]
    fn module_then_terminate() {
        let banks = ModuleBanks::shared(bank(true, false));
        let mut r = Router::single(Policy::scripted(4, vec![0, 3]).unwrap(), 3).unwrap();
        let t = run(&mut r, &banks, 2.0, None);
        assert_eq!(t.output_value.data(), &[6.0]);
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.actions(), vec![RoutingAction::Module(0), RoutingAction::Terminate]);
        assert!(!t.forced_stop);
    }

    #[test]
    fn fig4_path() {
        let banks = ModuleBanks::shared(bank(true, false));
        let mut r = Router::single(Policy::scripted(4, vec![0, 2, 3]).unwrap(), 3).unwrap();
        let t = run(&mut r, &banks, 1.0, None);
        assert_eq!(t.output_value.data(), &[3.0 * 0.8]);
    }

    #[test]
    fn all_skip_is_identity() {
        let banks = ModuleBanks::shared(bank(false, true));
        let mut r = Router::single(Policy::scripted(4, vec![3]).unwrap(), 3).unwrap();
        let t = run(&mut r, &banks, 1.7, None);
        assert_eq!(t.output_value.data(), &[1.7]);
        assert_eq!(t.steps.len(), 3);
        assert!(t.forced_stop);
        assert!(t.steps.iter().all(|s| s.action() == RoutingAction::Skip));
    }

    fn sequences(max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for m in 0..3 {
                    let mut t: Vec<usize> = s.clone();
                    t.push(m);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    /// Every path of up to three modules equals the direct fold of slopes.
    #[test]
    fn composition_oracle() {
        let banks = ModuleBanks::per_depth(vec![bank(true, false), bank(true, false), bank(true, false)]);
        for seq in sequences(3) {
            let mut script = seq.clone();
            script.push(3);
            let policies = (0..3).map(|_| Policy::scripted(4, script.clone()).unwrap()).collect();
            let mut r = Router::per_decision(policies).unwrap();
            for x in [1.0, -0.37, 2.0] {
                let t = run(&mut r, &banks, x, None);
                let expected = seq.iter().fold(x, |h, &m| h * SLOPES[m]);
                assert_eq!(t.output_value.data(), &[expected], "{seq:?}");
                assert_eq!(t.forced_stop, seq.len() == 3);
                assert_eq!(t.steps.len(), (seq.len() + 1).min(3));
            }
        }
    }

    #[test]
    fn single_router_cannot_stop_at_depth_zero() {
        let r = Router::single(Policy::scripted(4, vec![3]).unwrap(), 2).unwrap();
        let space = r.action_space(&bank(true, false), 0);
        assert_eq!(space.allowed, vec![0, 1, 2]);
        assert_eq!(r.action_space(&bank(true, false), 1).allowed, vec![0, 1, 2, 3]);
        let banks = ModuleBanks::shared(bank(true, false));
        let mut r = r;
        let mut g = Graph::new();
        let err = r.route_forward(
            &mut g,
            &banks,
            &Tensor::vector(vec![1.0]).unwrap(),
            None,
            Mode::Eval,
            &mut seeded(0),
        );
        assert!(err.is_err());
    }

    #[test]
    fn transitions() {
        let banks = ModuleBanks::shared(bank(true, true));
        let s = RoutingState::new(Some(Tensor::vector(vec![2.0]).unwrap()), Some(1), 0);
        let t = transition(&s, RoutingAction::Module(0), &banks).unwrap();
        assert_eq!(t.activation.unwrap().data(), &[6.0]);
        assert_eq!((t.meta, t.depth), (Some(1), 1));
        let k = transition(&s, RoutingAction::Skip, &banks).unwrap();
        assert_eq!(k.activation, s.activation);
        assert_eq!(k.depth, 1);
        assert!(transition(&s, RoutingAction::Terminate, &banks).is_err());
    }

    fn q_policy(n: usize) -> Policy {
        Policy::new(PolicyConfig::new(Strategy::QLearning, Approximator::Tabular, n)).unwrap()
    }

    #[test]
    fn dispatch_by_meta() {
        let mut r = Router::dispatched_by_meta((0..3).map(|_| q_policy(3)).collect(), 1).unwrap();
        let mut g = Graph::new();
        let mut rng = seeded(0);
        for _ in 0..5 {
            let s = RoutingState::new(None, Some(1), 0);
            assert_eq!(r.dispatch(&mut g, &s, Mode::Train, &mut rng).unwrap().0, 1);
        }
        let s = RoutingState::new(None, Some(3), 0);
        assert!(matches!(
            r.dispatch(&mut g, &s, Mode::Train, &mut rng),
            Err(Error::UnknownMeta(3))
        ));
        let mut one = Router::dispatched_by_meta(vec![q_policy(3)], 1).unwrap();
        let s = RoutingState::new(None, Some(7), 0);
        assert_eq!(one.dispatch(&mut g, &s, Mode::Train, &mut rng).unwrap().0, 0);
    }

    #[test]
    fn dispatch_by_input_follows_dispatcher_policy() {
        let dispatcher = Policy::new(PolicyConfig {
            input_dim: 1,
            seed: 4,
            ..PolicyConfig::new(Strategy::Reinforce, Approximator::Neural { hidden: 4 }, 3)
        })
        .unwrap();
        let mut r = Router::dispatched_by_input(dispatcher, (0..3).map(|_| q_policy(3)).collect(), 1).unwrap();
        let s = RoutingState::new(Some(Tensor::vector(vec![0.4]).unwrap()), None, 0);
        let mut g = Graph::new();
        let probs = r
            .dispatcher_mut()
            .unwrap()
            .select(&mut g, &s, &ActionSpace::full(3), Mode::Eval, &mut seeded(0))
            .unwrap()
            .probs
            .unwrap();
        let mut rng = seeded(1);
        let draws = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            let mut g = Graph::new();
            counts[r.dispatch(&mut g, &s, Mode::Train, &mut rng).unwrap().0] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            assert!(
                (*c as f64 - draws as f64 * p).abs() < 3.0 * sigma,
                "{counts:?} vs {probs:?}"
            );
        }
    }

    #[test]
    fn per_decision_subrouters_see_their_depth() {
        let policies = (0..3)
            .map(|_| Policy::new(PolicyConfig::new(Strategy::Reinforce, Approximator::Tabular, 4)).unwrap())
            .collect();
        let mut r = Router::per_decision(policies).unwrap();
        let banks = ModuleBanks::shared(bank(true, false));
        let mut rng = seeded(3);
        for _ in 0..200 {
            let mut g = Graph::new();
            let t = r
                .route_forward(
                    &mut g,
                    &banks,
                    &Tensor::vector(vec![0.5]).unwrap(),
                    Some(0),
                    Mode::Train,
                    &mut rng,
                )
                .unwrap();
            assert!(t.steps.len() <= 3);
            for s in &t.steps {
                assert_eq!(s.decider, Decider::Subrouter(s.state.depth));
                assert_eq!(s.state.meta, Some(0));
            }
            let stops = t
                .steps
                .iter()
                .filter(|s| s.action() == RoutingAction::Terminate)
                .count();
            assert_eq!(stops, usize::from(!t.forced_stop));
            if !t.forced_stop {
                assert_eq!(t.steps.last().unwrap().action(), RoutingAction::Terminate);
            }
        }
    }

    #[test]
    fn input_buckets() {
        let b = InputBuckets {
            count: 4,
            low: -1.0,
            high: 1.0,
        };
        assert_eq!(b.bucket(-1.0), 0);
        assert_eq!(b.bucket(-0.49), 1);
        assert_eq!(b.bucket(0.0), 2);
        assert_eq!(b.bucket(1.0), 3);
        assert_eq!(b.bucket(7.0), 3);
    }

    #[test]
    fn validate_rejects_deep_non_square() {
        let wide = ModuleBank::build(&BankSpec {
            kind: crate::bank::ModuleKind::Linear,
            in_dim: 2,
            out_dim: 3,
            ..BankSpec::scalar(2, 0)
        })
        .unwrap();
        let r = Router::single(q_policy(2), 2).unwrap();
        assert!(r.validate(&ModuleBanks::shared(wide.clone())).is_err());
        let r = Router::single(q_policy(2), 1).unwrap();
        assert!(r.validate(&ModuleBanks::shared(wide)).is_ok());
    }
}
