//! Gumbel relaxations and the RELAX estimator with a learned control
//! variate.
//!
//! The control variate is `c(y) = w2·tanh(W1·y + b1) + b2`. Its variance
//! objective `‖ĝ‖²` involves derivatives of `∇_y c`, which the tape does not
//! provide, so everything here is written out by hand and checked against
//! finite differences in the tests.

use rand::Rng;

use crate::error::{Error, Result};

/// `−ln(−ln u)` for `u ∈ (0, 1)`.
pub fn gumbel(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.iter().map(|v| v / total).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// `softmax((logits + g)/τ)` with `g` built from `uniforms`.
pub fn relaxed_sample(logits: &[f64], uniforms: &[f64], tau: f64) -> Vec<f64> {
    let z: Vec<f64> = logits
        .iter()
        .zip(uniforms)
        .map(|(l, &u)| (l + gumbel(u)) / tau)
        .collect();
    softmax(&z)
}

/// The hard sample `argmax(logits + g)`; distributed as `softmax(logits)`.
pub fn hard_sample(logits: &[f64], uniforms: &[f64]) -> usize {
    let z: Vec<f64> = logits.iter().zip(uniforms).map(|(l, &u)| l + gumbel(u)).collect();
    super::argmax(&z).expect("nonempty logits")
}

/// `(diag(y) − y yᵀ)·u / τ`, the Jacobian of `softmax(z/τ)` applied to `u`.
fn softmax_jvp(y: &[f64], u: &[f64], tau: f64) -> Vec<f64> {
    let yu: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
    y.iter().zip(u).map(|(yi, ui)| yi * (ui - yu) / tau).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of a control variate's scalar outputs with respect to its
/// parameters, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct CvGradient {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl CvGradient {
    fn zeros(k: usize, hidden: usize) -> Self {
        CvGradient {
            w1: vec![0.0; k * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    fn axpy(&mut self, a: f64, other: &CvGradient) {
        for (x, y) in self.w1.iter_mut().zip(&other.w1) {
            *x += a * y;
        }
        for (x, y) in self.b1.iter_mut().zip(&other.b1) {
            *x += a * y;
        }
        for (x, y) in self.w2.iter_mut().zip(&other.w2) {
            *x += a * y;
        }
        self.b2 += a * other.b2;
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.w1.clone();
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }
}

/// One-hidden-layer tanh network on a relaxed sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlVariate {
    k: usize,
    hidden: usize,
    /// Row-major `[hidden, k]`.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

impl ControlVariate {
    pub const DEFAULT_HIDDEN: usize = 16;

    /// Input weights uniform in `±1/√k`; everything else zero, so the
    /// variate starts at exactly 0.
    pub fn new(k: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        ControlVariate {
            k,
            hidden,
            w1: (0..k * hidden).map(|_| rng.random_range(-bound..bound)).collect(),
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// The identically zero variate.
    pub fn zero(k: usize) -> Self {
        ControlVariate {
            k,
            hidden: 1,
            w1: vec![0.0; k],
            b1: vec![0.0],
            w2: vec![0.0],
            b2: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + 2 * self.hidden + 1
    }

    pub fn parameters(&self) -> Vec<f64> {
        CvGradient {
            w1: self.w1.clone(),
            b1: self.b1.clone(),
            w2: self.w2.clone(),
            b2: self.b2,
        }
        .flatten()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.parameter_count());
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, rest) = rest.split_at(self.hidden);
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    /// Hidden activations `h` and `1 − h²`.
    fn hidden_layer(&self, y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| (dot(&self.w1[j * self.k..(j + 1) * self.k], y) + self.b1[j]).tanh())
            .collect();
        let d = h.iter().map(|v| 1.0 - v * v).collect();
        (h, d)
    }

    pub fn value(&self, y: &[f64]) -> f64 {
        let (h, _) = self.hidden_layer(y);
        dot(&self.w2, &h) + self.b2
    }

    /// `∇_y c(y)`.
    pub fn input_gradient(&self, y: &[f64]) -> Vec<f64> {
        let (_, d) = self.hidden_layer(y);
        let mut out = vec![0.0; self.k];
        for j in 0..self.hidden {
            let s = self.w2[j] * d[j];
            for (o, w) in out.iter_mut().zip(&self.w1[j * self.k..(j + 1) * self.k]) {
                *o += s * w;
            }
        }
        out
    }

    /// `∂c(y)/∂φ`.
    fn value_gradient(&self, y: &[f64]) -> CvGradient {
        let (h, d) = self.hidden_layer(y);
        let mut g = CvGradient::zeros(self.k, self.hidden);
        for j in 0..self.hidden {
            let s = self.w2[j] * d[j];
            g.b1[j] = s;
            for i in 0..self.k {
                g.w1[j * self.k + i] = s * y[i];
            }
        }
        g.w2 = h;
        g.b2 = 1.0;
        g
    }

    /// `∂/∂φ [uᵀ ∇_y c(y)]` with `u` held fixed.
    fn directional_gradient(&self, y: &[f64], u: &[f64]) -> CvGradient {
        let (h, d) = self.hidden_layer(y);
        let mut g = CvGradient::zeros(self.k, self.hidden);
        for j in 0..self.hidden {
            let row = &self.w1[j * self.k..(j + 1) * self.k];
            let p = dot(row, u);
            let curvature = -2.0 * p * self.w2[j] * h[j] * d[j];
            g.w2[j] = p * d[j];
            g.b1[j] = curvature;
            for i in 0..self.k {
                g.w1[j * self.k + i] = u[i] * self.w2[j] * d[j] + curvature * y[i];
            }
        }
        g
    }

    /// Plain gradient descent on the parameters.
    pub fn descend(&mut self, grad: &CvGradient, lr: f64) {
        for (p, g) in self.w1.iter_mut().zip(&grad.w1) {
            *p -= lr * g;
        }
        for (p, g) in self.b1.iter_mut().zip(&grad.b1) {
            *p -= lr * g;
        }
        for (p, g) in self.w2.iter_mut().zip(&grad.w2) {
            *p -= lr * g;
        }
        self.b2 -= lr * grad.b2;
    }
}

/// The relaxed sample conditioned on the hard action, with the per-row
/// factors of its Jacobian with respect to the logits.
struct Conditional {
    sample: Vec<f64>,
    /// `c_i` in `∂x̃_i/∂θ_j = c_i (δ_ij − π_j)`; zero for the hard action.
    factors: Vec<f64>,
}

fn conditional_sample(log_probs: &[f64], hard: usize, v: &[f64], tau: f64) -> Conditional {
    let e: Vec<f64> = v.iter().map(|u| -u.ln()).collect();
    let mut x = vec![0.0; e.len()];
    let mut factors = vec![0.0; e.len()];
    for i in 0..e.len() {
        if i == hard {
            x[i] = -e[i].ln();
        } else {
            let ratio = e[i] * (-log_probs[i]).exp();
            let a = ratio + e[hard];
            x[i] = -a.ln();
            factors[i] = ratio / a;
        }
    }
    let scaled: Vec<f64> = x.iter().map(|xi| xi / tau).collect();
    Conditional {
        sample: softmax(&scaled),
        factors,
    }
}

/// `Dᵀw` for the conditional-sample Jacobian `D`.
fn conditional_vjp(cond: &Conditional, probs: &[f64], w: &[f64]) -> Vec<f64> {
    let s: f64 = cond.factors.iter().zip(w).map(|(c, wi)| c * wi).sum();
    (0..probs.len())
        .map(|j| cond.factors[j] * w[j] - probs[j] * s)
        .collect()
}

/// `D·u`.
fn conditional_jvp(cond: &Conditional, probs: &[f64], u: &[f64]) -> Vec<f64> {
    let pu = dot(probs, u);
    cond.factors.iter().zip(u).map(|(c, ui)| c * (ui - pu)).collect()
}

#[derive(Clone, Debug)]
pub struct RelaxEstimate {
    /// Estimate of `∇_θ E[f]` with respect to the logits.
    pub gradient: Vec<f64>,
    /// `∂‖ĝ‖²/∂φ` for the control variate.
    pub variance_gradient: CvGradient,
    pub relaxed: Vec<f64>,
    pub conditional: Vec<f64>,
}

/// One RELAX sample:
/// `ĝ = (f − c(z̃))·∇log p(b) + ∇_θ c(z) − ∇_θ c(z̃)`,
/// where `b` is the hard action drawn from `uniforms`, `z` the relaxed
/// sample from the same noise and `z̃` the relaxed sample conditioned on `b`
/// drawn from `conditional_uniforms`.
pub fn relax_estimate(
    logits: &[f64],
    hard: usize,
    uniforms: &[f64],
    conditional_uniforms: &[f64],
    tau: f64,
    reward: f64,
    cv: &ControlVariate,
) -> Result<RelaxEstimate> {
    let k = logits.len();
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if cv.k() != k || uniforms.len() != k || conditional_uniforms.len() != k || hard >= k {
        return Err(Error::Dimension {
            expected: k,
            got: cv.k(),
        });
    }
    let log_probs = log_softmax(logits);
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();

    let z = relaxed_sample(&log_probs, uniforms, tau);
    let cond = conditional_sample(&log_probs, hard, conditional_uniforms, tau);
    let zt = &cond.sample;

    let score: Vec<f64> = (0..k).map(|i| f64::from(u8::from(i == hard)) - probs[i]).collect();
    let path_z = softmax_jvp(&z, &cv.input_gradient(&z), tau);
    let path_zt = conditional_vjp(&cond, &probs, &softmax_jvp(zt, &cv.input_gradient(zt), tau));
    let advantage = reward - cv.value(zt);
    let gradient: Vec<f64> = (0..k).map(|i| advantage * score[i] + path_z[i] - path_zt[i]).collect();

    let mut variance_gradient = CvGradient::zeros(k, cv.hidden);
    variance_gradient.axpy(-2.0 * dot(&gradient, &score), &cv.value_gradient(zt));
    variance_gradient.axpy(2.0, &cv.directional_gradient(&z, &softmax_jvp(&z, &gradient, tau)));
    let u_t = softmax_jvp(zt, &conditional_jvp(&cond, &probs, &gradient), tau);
    variance_gradient.axpy(-2.0, &cv.directional_gradient(zt, &u_t));

    if !gradient.iter().all(|g| g.is_finite()) || !variance_gradient.flatten().iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite {
            op: "relax_estimate".into(),
        });
    }
    Ok(RelaxEstimate {
        gradient,
        variance_gradient,
        relaxed: z,
        conditional: cond.sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::distr::Open01;

    fn uniforms(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        (0..k).map(|_| rng.sample(Open01)).collect()
    }

    fn trained_cv(k: usize, seed: u64) -> ControlVariate {
        let mut rng = seeded(seed);
        let mut cv = ControlVariate::new(k, 5, &mut rng);
        let flat: Vec<f64> = (0..cv.parameter_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        cv.set_parameters(&flat);
        cv
    }

    #[test]
    fn zero_variate_is_reinforce() {
        let logits = [0.3, -0.2, 1.1];
        let mut rng = seeded(3);
        for _ in 0..20 {
            let u = uniforms(&mut rng, 3);
            let v = uniforms(&mut rng, 3);
            let b = hard_sample(&logits, &u);
            let est = relax_estimate(&logits, b, &u, &v, 0.5, 0.7, &ControlVariate::zero(3)).unwrap();
            let p = softmax(&logits);
            for i in 0..3 {
                let expected = 0.7 * (f64::from(u8::from(i == b)) - p[i]);
                assert!((est.gradient[i] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn large_temperature_flattens() {
        let y = relaxed_sample(&[5.0, -3.0, 0.0], &[0.1, 0.5, 0.9], 1e9);
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn conditional_sample_keeps_hard_action() {
        let mut rng = seeded(11);
        let logits = [0.5, -1.0, 0.2, 2.0];
        let lp = log_softmax(&logits);
        for _ in 0..200 {
            let u = uniforms(&mut rng, 4);
            let b = hard_sample(&logits, &u);
            let cond = conditional_sample(&lp, b, &uniforms(&mut rng, 4), 1.0);
            assert_eq!(super::super::argmax(&cond.sample), Some(b));
        }
    }

    /// The pathwise terms equal finite differences of
    /// `θ ↦ c(z(θ)) − c(z̃(θ))` at fixed noise.
    #[test]
    fn pathwise_terms_match_finite_differences() {
        let k = 4;
        let cv = trained_cv(k, 7);
        let mut rng = seeded(8);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
            let u = uniforms(&mut rng, k);
            let v = uniforms(&mut rng, k);
            let b = hard_sample(&logits, &u);
            let tau = 0.7;
            let est = relax_estimate(&logits, b, &u, &v, tau, 0.0, &cv).unwrap();

            let probs = softmax(&logits);
            let cond = conditional_sample(&log_softmax(&logits), b, &v, tau);
            let score: Vec<f64> = (0..k).map(|i| f64::from(u8::from(i == b)) - probs[i]).collect();
            let pathwise: Vec<f64> = (0..k)
                .map(|i| est.gradient[i] + cv.value(&cond.sample) * score[i])
                .collect();

            let objective = |theta: &[f64]| {
                let lp = log_softmax(theta);
                cv.value(&relaxed_sample(&lp, &u, tau)) - cv.value(&conditional_sample(&lp, b, &v, tau).sample)
            };
            for i in 0..k {
                let h = 1e-6;
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let numeric = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!(
                    (numeric - pathwise[i]).abs() < 1e-7,
                    "{i}: {numeric} vs {}",
                    pathwise[i]
                );
            }
        }
    }

    #[test]
    fn variance_gradient_matches_finite_differences() {
        let k = 3;
        let base = trained_cv(k, 21);
        let mut rng = seeded(22);
        for _ in 0..5 {
            let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = uniforms(&mut rng, k);
            let v = uniforms(&mut rng, k);
            let b = hard_sample(&logits, &u);
            let est = relax_estimate(&logits, b, &u, &v, 0.5, 0.9, &base).unwrap();
            let analytic = est.variance_gradient.flatten();

            let flat = base.parameters();
            let sq_norm = |params: &[f64]| {
                let mut cv = base.clone();
                cv.set_parameters(params);
                let g = relax_estimate(&logits, b, &u, &v, 0.5, 0.9, &cv).unwrap().gradient;
                dot(&g, &g)
            };
            for i in 0..flat.len() {
                let h = 1e-6;
                let mut plus = flat.clone();
                plus[i] += h;
                let mut minus = flat.clone();
                minus[i] -= h;
                let numeric = (sq_norm(&plus) - sq_norm(&minus)) / (2.0 * h);
                let scale = 1f64.max(numeric.abs());
                assert!(
                    (numeric - analytic[i]).abs() < 1e-6 * scale,
                    "{i}: {numeric} vs {}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn rejects_non_positive_temperature() {
        let cv = ControlVariate::zero(2);
        assert!(relax_estimate(&[0.0, 0.0], 0, &[0.5, 0.5], &[0.5, 0.5], 0.0, 1.0, &cv).is_err());
    }
}
