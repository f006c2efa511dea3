use crate::nn::{NodeId, Tensor};

/// What the router may do at a decision point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoutingAction {
    /// Apply the module with this index in the current bank.
    Module(usize),
    /// Stop and emit the current activation.
    Terminate,
    /// Advance depth without transforming the activation.
    Skip,
}

impl RoutingAction {
    pub fn is_module(&self) -> bool {
        matches!(self, RoutingAction::Module(_))
    }
}

impl std::fmt::Display for RoutingAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoutingAction::Module(i) => write!(f, "m{i}"),
            RoutingAction::Terminate => f.write_str("stop"),
            RoutingAction::Skip => f.write_str("skip"),
        }
    }
}

/// The router's view at one decision point: current activation, optional
/// task label, and how many transformations have been applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    pub activation: Option<Tensor>,
    pub meta: Option<usize>,
    pub depth: usize,
}

impl RoutingState {
    pub fn new(activation: Option<Tensor>, meta: Option<usize>, depth: usize) -> Self {
        debug_assert!(activation.is_some() || meta.is_some());
        RoutingState {
            activation,
            meta,
            depth,
        }
    }
}

/// Actions legal in one state, as indices into the bank's action space,
/// with the action each index stands for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActionSpace {
    pub size: usize,
    pub allowed: Vec<usize>,
    pub actions: Vec<RoutingAction>,
}

impl ActionSpace {
    /// Every index allowed, each labelled as a module.
    pub fn full(size: usize) -> Self {
        ActionSpace {
            size,
            allowed: (0..size).collect(),
            actions: (0..size).map(RoutingAction::Module).collect(),
        }
    }

    pub fn action(&self, position: usize) -> RoutingAction {
        self.actions[position]
    }

    pub fn position(&self, index: usize) -> Option<usize> {
        self.allowed.iter().position(|&a| a == index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Explore and record what updates need.
    Train,
    /// Act greedily with respect to the current estimates.
    Eval,
}

/// Noise and relaxed sample recorded by the Gumbel and RELAX strategies.
#[derive(Clone, Debug)]
pub struct RelaxedSample {
    /// `softmax((logits + g)/τ)` over the allowed actions.
    pub sample: Vec<f64>,
    /// Uniforms that produced the Gumbel noise `g`.
    pub uniforms: Vec<f64>,
    /// Fresh uniforms for the conditional sample given the hard action.
    pub conditional_uniforms: Vec<f64>,
    /// Tape node holding the relaxed weight of the chosen action.
    pub hard_weight: Option<NodeId>,
}

/// One routing choice plus whatever its strategy needs for the update.
#[derive(Clone, Debug)]
pub struct Decision {
    pub action: RoutingAction,
    /// Index into the full action space.
    pub index: usize,
    /// False exactly when the action came from an explicit exploration branch.
    pub greedy: bool,
    pub space: ActionSpace,
    /// Policy probabilities over `space.allowed`, when the strategy has them.
    pub probs: Option<Vec<f64>>,
    /// Tape node for `log π(a)`.
    pub log_prob: Option<NodeId>,
    /// Tape node for the logits (or action values) over `space.allowed`.
    pub logits: Option<NodeId>,
    /// Tape node for the state value of advantage learners.
    pub value: Option<NodeId>,
    /// `π(a)/μ(a)` for off-policy sampled REINFORCE.
    pub importance_weight: Option<f64>,
    pub relaxed: Option<RelaxedSample>,
    /// Straight-through gate multiplied into the module output.
    pub gate: Option<NodeId>,
}

impl Decision {
    pub fn simple(position: usize, greedy: bool, space: ActionSpace) -> Self {
        Decision {
            action: space.action(position),
            index: space.allowed[position],
            greedy,
            space,
            probs: None,
            log_prob: None,
            logits: None,
            value: None,
            importance_weight: None,
            relaxed: None,
            gate: None,
        }
    }

    /// Position of the chosen action within `space.allowed`.
    pub fn position(&self) -> usize {
        self.space.position(self.index).expect("decision index is allowed")
    }
}

/// Lowest-index argmax over a slice; `None` when empty.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}
