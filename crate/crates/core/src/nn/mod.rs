//! Dense-tensor reverse-mode autodiff and first-order optimizers.

mod graph;
mod layers;
mod optim;
mod param;
mod tensor;

pub use graph::{Graph, NodeId};
pub use layers::{Activation, Dense, Mlp};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind};
pub use param::Parameter;
pub use tensor::Tensor;
