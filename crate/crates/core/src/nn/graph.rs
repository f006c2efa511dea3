//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every primitive appends a node holding its value and the ids of its
//! inputs. [`Graph::backward`] walks the tape in reverse once, adding
//! `∂loss/∂p` into each reachable [`Parameter`]. A tape can be
//! backpropagated only once; build a fresh graph per forward pass.
//!
//! All primitives validate shapes and reject non-finite results, so a
//! diverging run surfaces as an error at the first offending op.

use super::param::Parameter;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(Parameter),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    Gather(NodeId, Vec<usize>),
    Mse(NodeId, Tensor),
    CrossEntropy(NodeId, Vec<usize>),
    StraightThrough(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backpropagated: bool,
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap();
    (shape.iter().product::<usize>() / cols, cols)
}

fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / total));
    }
    out
}

fn log_softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<NodeId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op_name.to_string(),
            });
        }
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Inserts a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a parameter leaf; its gradient accumulates on `backward`.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.nodes.push(Node {
            value: p.value(),
            op: Op::Param(p.clone()),
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `[m,k]·[k,n] → [m,n]`, or vector-matrix `[k]·[k,n] → [n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sb.len() != 2 {
            return Err(bad());
        }
        let (m, k, out_shape) = match sa.len() {
            1 => (1, sa[0], vec![sb[1]]),
            2 => (sa[0], sa[1], vec![sa[0], sb[1]]),
            _ => return Err(bad()),
        };
        if k != sb[0] {
            return Err(bad());
        }
        let n = sb[1];
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.push("matmul", out_shape, out, Op::MatMul(a, b))
    }

    /// Elementwise sum. A rank-1 `b` whose length equals the trailing axis
    /// of `a` is added to every row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
            return self.push("add", sa, data, Op::Add(a, b));
        }
        if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            let cols = sb[0];
            let db = self.data(b).to_vec();
            let data = self.data(a).iter().enumerate().map(|(i, x)| x + db[i % cols]).collect();
            return self.push("add", sa, data, Op::AddRow(a, b));
        }
        Err(Error::Shape {
            op: "add",
            lhs: sa,
            rhs: sb,
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push("sub", shape, data, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", shape, data, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, data, Op::Scale(a, factor))
    }

    /// Multiplies every entry of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let factor = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale_by", shape, data, Op::ScaleBy(a, s))
    }

    fn unary(&mut self, name: &'static str, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> Result<NodeId> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, data, op)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// Natural log; non-positive inputs yield a `NonFinite` error.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    /// Softmax along the trailing axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_of(&shape);
        let data = softmax_rows(self.data(a), cols);
        self.push("softmax", shape, data, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = rows_of(&shape);
        let data = log_softmax_rows(self.data(a), cols);
        self.push("log_softmax", shape, data, Op::LogSoftmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.data(a).iter().sum();
        self.push("sum", vec![1], vec![total], Op::Sum(a))
    }

    /// Selects entries of a rank-1 tensor.
    pub fn gather(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 1 || indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return Err(Error::Shape {
                op: "gather",
                lhs: shape,
                rhs: indices.to_vec(),
            });
        }
        let data = indices.iter().map(|&i| self.data(a)[i]).collect();
        self.push("gather", vec![indices.len()], data, Op::Gather(a, indices.to_vec()))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.shape(pred) != target.shape() {
            return Err(Error::Shape {
                op: "mse",
                lhs: self.shape(pred).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = target.len() as f64;
        let loss = self
            .data(pred)
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        self.push("mse", vec![1], vec![loss], Op::Mse(pred, target.clone()))
    }

    /// Softmax cross-entropy of logits against class indices, averaged over
    /// rows. A rank-1 `logits` takes exactly one class.
    pub fn cross_entropy(&mut self, logits: NodeId, classes: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        let (rows, cols) = rows_of(&shape);
        if shape.len() > 2 || classes.len() != rows || classes.iter().any(|&c| c >= cols) {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: classes.to_vec(),
            });
        }
        let logp = log_softmax_rows(self.data(logits), cols);
        let loss = -classes
            .iter()
            .enumerate()
            .map(|(r, &c)| logp[r * cols + c])
            .sum::<f64>()
            / rows as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy(logits, classes.to_vec()),
        )
    }

    /// Forward value exactly 1; backward passes the incoming gradient
    /// through to `a` unchanged (the straight-through gate).
    pub fn straight_through(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).len() != 1 {
            return Err(Error::Shape {
                op: "straight_through",
                lhs: self.shape(a).to_vec(),
                rhs: vec![1],
            });
        }
        self.push("straight_through", vec![1], vec![1.0], Op::StraightThrough(a))
    }

    /// Accumulates `∂loss/∂p` into every parameter reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backpropagated {
            return Err(Error::AlreadyBackpropagated);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backpropagated = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let out = node.value.data();
            let send = |grads: &mut Vec<Option<Vec<f64>>>, to: NodeId, delta: Vec<f64>| match &mut grads[to.0] {
                Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
                slot => *slot = Some(delta),
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => p.accumulate_grad(&up),
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (k, n) = (sb[0], sb[1]);
                    let m = if sa.len() == 1 { 1 } else { sa[0] };
                    let (da, db) = (self.data(*a), self.data(*b));
                    let mut ga = vec![0.0; m * k];
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += up[i * n + j] * db[p * n + j];
                                gb[p * n + j] += da[i * k + p] * up[i * n + j];
                            }
                            ga[i * k + p] = acc;
                        }
                    }
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, up.clone());
                    send(&mut grads, b, up);
                }
                Op::AddRow(a, b) => {
                    let cols = self.value(*b).len();
                    let mut gb = vec![0.0; cols];
                    for (i, g) in up.iter().enumerate() {
                        gb[i % cols] += g;
                    }
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, up);
                    send(&mut grads, b, gb);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    send(&mut grads, b, up.iter().map(|g| -g).collect());
                    send(&mut grads, a, up);
                }
                Op::Mul(a, b) => {
                    let ga = up.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    let gb = up.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    let (a, b) = (*a, *b);
                    send(&mut grads, a, ga);
                    send(&mut grads, b, gb);
                }
                Op::Scale(a, f) => {
                    let a = *a;
                    let f = *f;
                    send(&mut grads, a, up.iter().map(|g| g * f).collect());
                }
                Op::ScaleBy(a, s) => {
                    let factor = self.data(*s)[0];
                    let gs: f64 = up.iter().zip(self.data(*a)).map(|(g, x)| g * x).sum();
                    let (a, s) = (*a, *s);
                    send(&mut grads, a, up.iter().map(|g| g * factor).collect());
                    send(&mut grads, s, vec![gs]);
                }
                Op::Tanh(a) => {
                    let ga = up.iter().zip(out).map(|(g, y)| g * (1.0 - y * y)).collect();
                    send(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = up
                        .iter()
                        .zip(self.data(*a))
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = up.iter().zip(out).map(|(g, y)| g * y).collect();
                    send(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = up.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                    send(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let cols = node.value.width();
                    let mut ga = Vec::with_capacity(up.len());
                    for (gr, yr) in up.chunks(cols).zip(out.chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        ga.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - dot)));
                    }
                    send(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let cols = node.value.width();
                    let mut ga = Vec::with_capacity(up.len());
                    for (gr, lr) in up.chunks(cols).zip(out.chunks(cols)) {
                        let total: f64 = gr.iter().sum();
                        ga.extend(gr.iter().zip(lr).map(|(g, l)| g - l.exp() * total));
                    }
                    send(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    send(&mut grads, *a, vec![up[0]; n]);
                }
                Op::Gather(a, indices) => {
                    let mut ga = vec![0.0; self.value(*a).len()];
                    for (g, &i) in up.iter().zip(indices) {
                        ga[i] += g;
                    }
                    send(&mut grads, *a, ga);
                }
                Op::Mse(p, target) => {
                    let n = target.len() as f64;
                    let gp = self
                        .data(*p)
                        .iter()
                        .zip(target.data())
                        .map(|(x, t)| up[0] * 2.0 * (x - t) / n)
                        .collect();
                    send(&mut grads, *p, gp);
                }
                Op::CrossEntropy(l, classes) => {
                    let shape = self.shape(*l);
                    let (rows, cols) = rows_of(shape);
                    let mut gl = softmax_rows(self.data(*l), cols);
                    for (r, &c) in classes.iter().enumerate() {
                        gl[r * cols + c] -= 1.0;
                    }
                    let scale = up[0] / rows as f64;
                    gl.iter_mut().for_each(|g| *g *= scale);
                    send(&mut grads, *l, gl);
                }
                Op::StraightThrough(a) => send(&mut grads, *a, up),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
        let b = g.constant(Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1]);
        assert_eq!(g.value(c).data(), &[3.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = g.constant(t(&[2, 1], &[1.0, 1.0]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![1, 3]);
                assert_eq!(rhs, vec![2, 1]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[0.0, 0.0]));
        let s = g.softmax(a).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_three_way() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let ce = g.cross_entropy(a, &[1]).unwrap();
        assert!((g.value(ce).data()[0] - 3f64.ln()).abs() < 1e-15);
        assert!((g.value(ce).data()[0] - 1.0986).abs() < 1e-4);
    }

    #[test]
    fn square_gradient() {
        let p = Parameter::new("theta", Tensor::scalar(3.0).unwrap());
        let mut g = Graph::new();
        let x = g.param(&p);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(p.grad(), vec![6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_y() {
        let p = Parameter::new("logits", Tensor::vector(vec![0.0, 0.0]).unwrap());
        let mut g = Graph::new();
        let x = g.param(&p);
        let ce = g.cross_entropy(x, &[0]).unwrap();
        g.backward(ce).unwrap();
        assert_eq!(p.grad(), vec![-0.5, 0.5]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let p = Parameter::new("theta", Tensor::scalar(2.0).unwrap());
        let mut g = Graph::new();
        let x = g.param(&p);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::AlreadyBackpropagated)));
        assert_eq!(p.grad(), vec![4.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_rejected() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn log_of_zero_is_non_finite() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.log(a), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn straight_through_is_exactly_one_and_passes_gradient() {
        let p = Parameter::new("z", Tensor::scalar(0.37).unwrap());
        let mut g = Graph::new();
        let z = g.param(&p);
        let gate = g.straight_through(z).unwrap();
        assert_eq!(g.value(gate).data(), &[1.0]);
        let h = g.constant(t(&[2], &[2.0, 3.0]));
        let y = g.scale_by(h, gate).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(p.grad(), vec![5.0]);
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let p = Parameter::new("a", Tensor::scalar(3.0).unwrap());
        let mut g = Graph::new();
        let x = g.constant(t(&[1], &[2.0]));
        let a1 = g.param(&p);
        let h = g.scale_by(x, a1).unwrap();
        let a2 = g.param(&p);
        let y = g.scale_by(h, a2).unwrap();
        g.backward(y).unwrap();
        // d(a·a·x)/da = 2·a·x = 12
        assert_eq!(p.grad(), vec![12.0]);
    }
}
