use rand::Rng;

use super::graph::{Graph, NodeId};
use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::Result;

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Dense::from_values(name, in_dim, out_dim, w, vec![0.0; out_dim])
    }

    pub fn from_values(name: &str, in_dim: usize, out_dim: usize, w: Vec<f64>, b: Vec<f64>) -> Self {
        Dense {
            weight: Parameter::new(
                format!("{name}.weight"),
                Tensor::matrix(in_dim, out_dim, w).expect("dense weight"),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::vector(b).expect("dense bias")),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Dense layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
    activation: Activation,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "an mlp needs at least input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Tanh => g.tanh(h)?,
                    Activation::Relu => g.relu(h)?,
                };
            }
        }
        Ok(h)
    }

    /// Forward pass on a throwaway tape; for inference-only queries.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = self.forward(&mut g, xn)?;
        Ok(g.value(y).clone())
    }

    pub fn parameters(&self) -> Vec<Parameter> {
        self.layers.iter().flat_map(Dense::parameters).collect()
    }
}
