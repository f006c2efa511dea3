//! Analytic gradients of every primitive against central finite differences.

use proptest::prelude::*;
use routenet::nn::{Activation, Graph, Mlp, NodeId, Parameter, Tensor};
use routenet::rng::seeded;
use routenet::Result;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-6;

/// Compares backward gradients with central differences of the scalar
/// produced by `build` for every entry of every parameter.
fn check(params: &[Parameter], build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>) {
    let forward = |params: &[Parameter]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
        let out = build(&mut g, &ids).unwrap();
        g.value(out).item().unwrap()
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.param(p)).collect();
    let out = build(&mut g, &ids).unwrap();
    g.backward(out).unwrap();

    for p in params {
        let analytic = p.grad();
        let base = p.value();
        for i in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[i] += STEP;
            let mut minus = base.data().to_vec();
            minus[i] -= STEP;
            p.set_value(Tensor::new(base.shape().to_vec(), plus).unwrap()).unwrap();
            let fp = forward(params);
            p.set_value(Tensor::new(base.shape().to_vec(), minus).unwrap()).unwrap();
            let fm = forward(params);
            p.set_value(base.clone()).unwrap();
            let numeric = (fp - fm) / (2.0 * STEP);
            let scale = 1f64.max(analytic[i].abs()).max(numeric.abs());
            assert!(
                (analytic[i] - numeric).abs() <= REL_TOL * scale,
                "{}[{i}]: analytic {} vs numeric {}",
                p.name(),
                analytic[i],
                numeric
            );
        }
    }
}

fn param(name: &str, shape: &[usize], data: Vec<f64>) -> Parameter {
    Parameter::new(name, Tensor::new(shape.to_vec(), data).unwrap())
}

/// Reduces any tensor to a scalar through fixed random weights so the whole
/// Jacobian is exercised.
fn weighted_sum(g: &mut Graph, x: NodeId, weights: &[f64]) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(Tensor::new(shape, weights[..g.value(x).len()].to_vec()).unwrap());
    let prod = g.mul(x, w)?;
    g.sum(prod)
}

fn vals(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matmul_matrix(a in vals(6), b in vals(6), w in vals(4)) {
        let pa = param("a", &[2, 3], a);
        let pb = param("b", &[3, 2], b);
        check(&[pa, pb], |g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            weighted_sum(g, c, &w)
        });
    }

    #[test]
    fn matmul_vector(a in vals(3), b in vals(6), w in vals(2)) {
        let pa = param("a", &[3], a);
        let pb = param("b", &[3, 2], b);
        check(&[pa, pb], |g, ids| {
            let c = g.matmul(ids[0], ids[1])?;
            weighted_sum(g, c, &w)
        });
    }

    #[test]
    fn add_sub_mul(a in vals(4), b in vals(4), w in vals(4)) {
        let pa = param("a", &[4], a);
        let pb = param("b", &[4], b);
        check(&[pa, pb], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            let d = g.sub(s, ids[1])?;
            let m = g.mul(d, ids[1])?;
            let m2 = g.mul(m, ids[0])?;
            weighted_sum(g, m2, &w)
        });
    }

    #[test]
    fn add_row_broadcast(a in vals(6), b in vals(3), w in vals(6)) {
        let pa = param("a", &[2, 3], a);
        let pb = param("b", &[3], b);
        check(&[pa, pb], |g, ids| {
            let s = g.add(ids[0], ids[1])?;
            weighted_sum(g, s, &w)
        });
    }

    #[test]
    fn scale_and_scale_by(a in vals(3), s in -2.0f64..2.0, f in -3.0f64..3.0, w in vals(3)) {
        let pa = param("a", &[3], a);
        let ps = param("s", &[1], vec![s]);
        check(&[pa, ps], |g, ids| {
            let x = g.scale(ids[0], f)?;
            let y = g.scale_by(x, ids[1])?;
            let z = g.scale_by(y, ids[1])?;
            weighted_sum(g, z, &w)
        });
    }

    #[test]
    fn tanh_exp(a in vals(4), w in vals(4)) {
        let pa = param("a", &[4], a);
        check(&[pa], |g, ids| {
            let t = g.tanh(ids[0])?;
            let e = g.exp(t)?;
            weighted_sum(g, e, &w)
        });
    }

    #[test]
    fn relu_away_from_kink(a in prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], 4), w in vals(4)) {
        let pa = param("a", &[4], a);
        check(&[pa], |g, ids| {
            let r = g.relu(ids[0])?;
            weighted_sum(g, r, &w)
        });
    }

    #[test]
    fn log_positive(a in prop::collection::vec(0.1f64..3.0, 4), w in vals(4)) {
        let pa = param("a", &[4], a);
        check(&[pa], |g, ids| {
            let l = g.log(ids[0])?;
            weighted_sum(g, l, &w)
        });
    }

    #[test]
    fn softmax_rows(a in vals(6), w in vals(6)) {
        let pa = param("a", &[2, 3], a);
        check(&[pa], |g, ids| {
            let s = g.softmax(ids[0])?;
            weighted_sum(g, s, &w)
        });
    }

    #[test]
    fn log_softmax_vector(a in vals(5), w in vals(5)) {
        let pa = param("a", &[5], a);
        check(&[pa], |g, ids| {
            let s = g.log_softmax(ids[0])?;
            weighted_sum(g, s, &w)
        });
    }

    #[test]
    fn gather_repeats(a in vals(4), w in vals(3)) {
        let pa = param("a", &[4], a);
        check(&[pa], |g, ids| {
            let s = g.gather(ids[0], &[2, 0, 2])?;
            weighted_sum(g, s, &w)
        });
    }

    #[test]
    fn mse_loss(a in vals(3), t in vals(3)) {
        let pa = param("a", &[3], a);
        let target = Tensor::vector(t).unwrap();
        check(&[pa], |g, ids| g.mse(ids[0], &target));
    }

    #[test]
    fn cross_entropy_batch(a in vals(6), c0 in 0usize..3, c1 in 0usize..3) {
        let pa = param("a", &[2, 3], a);
        check(&[pa], |g, ids| g.cross_entropy(ids[0], &[c0, c1]));
    }

    #[test]
    fn five_parameter_mlp(seed in any::<u64>(), x in vals(2)) {
        let mlp = Mlp::new("mlp", &[2, 1, 1], Activation::Tanh, &mut seeded(seed));
        let params = mlp.parameters();
        prop_assert_eq!(params.iter().map(Parameter::len).sum::<usize>(), 5);
        let input = Tensor::vector(x).unwrap();
        check(&params, |g, _| {
            let xin = g.constant(input.clone());
            let y = mlp.forward(g, xin)?;
            let target = Tensor::vector(vec![0.3]).unwrap();
            g.mse(y, &target)
        });
    }
}
