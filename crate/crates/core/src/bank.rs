//! Routable function modules and the banks the router picks from.
//!
//! A bank's action index space is laid out as
//! `[module 0, …, module n−1, terminate?, skip?]`, with the two
//! pseudo-actions present only when the bank enables them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, Graph, Mlp, NodeId, Parameter, Tensor};
use crate::policy::RoutingAction;
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq)]
pub enum ModuleKind {
    /// `a·x` with one trainable scalar; width preserving.
    ScalarLinear,
    Linear,
    Mlp {
        hidden: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    /// Scalar slopes uniform in [−1, 1]; dense weights uniform in ±1/√fan_in.
    Uniform,
    /// Identity weights and zero bias (linear) or slope 1 (scalar).
    Identity,
    /// Fixed scalar slopes, one per module.
    Slopes(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BankSpec {
    pub kind: ModuleKind,
    pub count: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub init: Init,
    pub allow_termination: bool,
    pub allow_skip: bool,
    pub seed: u64,
}

impl BankSpec {
    pub fn scalar(count: usize, seed: u64) -> Self {
        BankSpec {
            kind: ModuleKind::ScalarLinear,
            count,
            in_dim: 1,
            out_dim: 1,
            init: Init::Uniform,
            allow_termination: false,
            allow_skip: false,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
enum Weights {
    Scalar(Parameter),
    Linear(Dense),
    Mlp(Mlp),
}

#[derive(Clone, Debug)]
pub struct FunctionModule {
    id: usize,
    kind: ModuleKind,
    weights: Weights,
    in_dim: usize,
    out_dim: usize,
}

impl FunctionModule {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn kind(&self) -> &ModuleKind {
        &self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn apply(&self, g: &mut Graph, h: NodeId) -> Result<NodeId> {
        let got = g.value(h).width();
        if got != self.in_dim {
            return Err(Error::Dimension {
                expected: self.in_dim,
                got,
            });
        }
        match &self.weights {
            Weights::Scalar(a) => {
                let a = g.param(a);
                g.scale_by(h, a)
            }
            Weights::Linear(d) => d.forward(g, h),
            Weights::Mlp(m) => m.forward(g, h),
        }
    }

    /// The slope of a scalar-linear module.
    pub fn slope(&self) -> Option<f64> {
        match &self.weights {
            Weights::Scalar(a) => Some(a.value().data()[0]),
            _ => None,
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        match &self.weights {
            Weights::Scalar(a) => vec![a.clone()],
            Weights::Linear(d) => d.parameters(),
            Weights::Mlp(m) => m.parameters(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModuleBank {
    modules: Vec<FunctionModule>,
    allow_termination: bool,
    allow_skip: bool,
}

impl ModuleBank {
    pub fn build(spec: &BankSpec) -> Result<Self> {
        if spec.count == 0 {
            return Err(Error::config("a module bank needs at least one module"));
        }
        if spec.in_dim == 0 || spec.out_dim == 0 {
            return Err(Error::config("module widths must be positive"));
        }
        let square = spec.in_dim == spec.out_dim;
        if spec.kind == ModuleKind::ScalarLinear && !square {
            return Err(Error::config(format!(
                "scalar-linear modules preserve width; got {}→{}",
                spec.in_dim, spec.out_dim
            )));
        }
        if spec.init == Init::Identity && !square {
            return Err(Error::config("identity init needs equal in and out widths"));
        }
        if let Init::Slopes(s) = &spec.init {
            if spec.kind != ModuleKind::ScalarLinear || s.len() != spec.count {
                return Err(Error::config(format!(
                    "fixed slopes need {} scalar-linear modules, got {} slopes",
                    spec.count,
                    s.len()
                )));
            }
        }
        if let ModuleKind::Mlp { hidden: 0 } = spec.kind {
            return Err(Error::config("mlp hidden width must be positive"));
        }

        let mut rng = seeded(spec.seed);
        let mut modules = Vec::with_capacity(spec.count);
        for id in 0..spec.count {
            let name = format!("module{id}");
            let weights = match (&spec.kind, &spec.init) {
                (ModuleKind::ScalarLinear, init) => {
                    let a = match init {
                        Init::Uniform => rng.random_range(-1.0..=1.0),
                        Init::Identity => 1.0,
                        Init::Slopes(s) => s[id],
                    };
                    Weights::Scalar(Parameter::new(format!("{name}.slope"), Tensor::scalar(a)?))
                }
                (ModuleKind::Linear, Init::Identity) => {
                    let n = spec.in_dim;
                    let w = (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect();
                    Weights::Linear(Dense::from_values(&name, n, n, w, vec![0.0; n]))
                }
                (ModuleKind::Linear, _) => Weights::Linear(Dense::new(&name, spec.in_dim, spec.out_dim, &mut rng)),
                (ModuleKind::Mlp { hidden }, _) => Weights::Mlp(Mlp::new(
                    &name,
                    &[spec.in_dim, *hidden, spec.out_dim],
                    Activation::Tanh,
                    &mut rng,
                )),
            };
            modules.push(FunctionModule {
                id,
                kind: spec.kind.clone(),
                weights,
                in_dim: spec.in_dim,
                out_dim: spec.out_dim,
            });
        }
        Ok(ModuleBank {
            modules,
            allow_termination: spec.allow_termination,
            allow_skip: spec.allow_skip,
        })
    }

    pub fn modules(&self) -> &[FunctionModule] {
        &self.modules
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn allows_termination(&self) -> bool {
        self.allow_termination
    }

    pub fn allows_skip(&self) -> bool {
        self.allow_skip
    }

    pub fn in_dim(&self) -> usize {
        self.modules[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.modules[0].out_dim
    }

    pub fn action_space_size(&self) -> usize {
        self.modules.len() + usize::from(self.allow_termination) + usize::from(self.allow_skip)
    }

    pub fn action_at(&self, index: usize) -> Result<RoutingAction> {
        let n = self.modules.len();
        let size = self.action_space_size();
        if index >= size {
            return Err(Error::ActionOutOfRange { index, size });
        }
        Ok(if index < n {
            RoutingAction::Module(index)
        } else if index == n && self.allow_termination {
            RoutingAction::Terminate
        } else {
            RoutingAction::Skip
        })
    }

    pub fn index_of(&self, action: RoutingAction) -> Option<usize> {
        let n = self.modules.len();
        match action {
            RoutingAction::Module(i) if i < n => Some(i),
            RoutingAction::Module(_) => None,
            RoutingAction::Terminate => self.allow_termination.then_some(n),
            RoutingAction::Skip => self.allow_skip.then_some(n + usize::from(self.allow_termination)),
        }
    }

    /// Applies the module chosen by `action` to `h`. Termination and skip
    /// are resolved by the routing engine and rejected here.
    pub fn apply(&self, g: &mut Graph, action: RoutingAction, h: NodeId) -> Result<NodeId> {
        match action {
            RoutingAction::Module(i) => self
                .modules
                .get(i)
                .ok_or(Error::ActionOutOfRange {
                    index: i,
                    size: self.modules.len(),
                })?
                .apply(g, h),
            other => Err(Error::config(format!(
                "`{other}` is not a module and cannot be applied"
            ))),
        }
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.modules.iter().flat_map(FunctionModule::parameters).collect()
    }
}
