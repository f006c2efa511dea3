//! Discrete-gradient estimators against the exact gradient of a softmax
//! bandit, `J(θ) = r·softmax(θ)`.

use std::io::Write;
use std::path::Path;

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::policy::{hard_sample, relax_estimate, relaxed_sample, softmax, ControlVariate};
use crate::rng::{derive_seed, seeded, RouteRng};

/// Reward vectors and policies per dimension in the protocol.
pub const PROTOCOL_DRAWS: usize = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct BanditInstance {
    pub r: Vec<f64>,
    pub theta: Vec<f64>,
}

impl BanditInstance {
    pub fn new(r: Vec<f64>, theta: Vec<f64>) -> Self {
        assert_eq!(r.len(), theta.len(), "rewards and logits must match");
        BanditInstance { r, theta }
    }

    /// Rewards uniform in [0, 1], logits standard normal.
    pub fn random(k: usize, rng: &mut impl Rng) -> Self {
        BanditInstance {
            r: random_rewards(k, rng),
            theta: random_logits(k, rng),
        }
    }

    pub fn k(&self) -> usize {
        self.r.len()
    }

    pub fn probs(&self) -> Vec<f64> {
        softmax(&self.theta)
    }

    pub fn objective(&self) -> f64 {
        objective(&self.r, &self.theta)
    }
}

pub fn random_rewards(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..k).map(|_| rng.random::<f64>()).collect()
}

pub fn random_logits(k: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..k).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn objective(r: &[f64], theta: &[f64]) -> f64 {
    softmax(theta).iter().zip(r).map(|(p, r)| p * r).sum()
}

/// `g_i = π_i (r_i − J)`.
pub fn analytic_gradient(inst: &BanditInstance) -> Vec<f64> {
    let pi = inst.probs();
    let j: f64 = pi.iter().zip(&inst.r).map(|(p, r)| p * r).sum();
    pi.iter().zip(&inst.r).map(|(p, r)| p * (r - j)).collect()
}

/// REINFORCE estimate for action `a` with baseline `b`:
/// `(r_a − b)(e_a − π)`.
pub fn reinforce_sample(r: &[f64], probs: &[f64], a: usize, b: f64) -> Vec<f64> {
    let adv = r[a] - b;
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| adv * (f64::from(u8::from(i == a)) - p))
        .collect()
}

/// `Σ_a π_a ĝ(a)` with a fixed baseline.
pub fn reinforce_expectation(inst: &BanditInstance, b: f64) -> Vec<f64> {
    let pi = inst.probs();
    let mut out = vec![0.0; inst.k()];
    for (a, pa) in pi.iter().enumerate() {
        for (o, g) in out.iter_mut().zip(reinforce_sample(&inst.r, &pi, a, b)) {
            *o += pa * g;
        }
    }
    out
}

/// `∇_θ r·softmax((θ + g)/τ) = y ⊙ (r − r·y)/τ`.
pub fn gumbel_sample(r: &[f64], theta: &[f64], uniforms: &[f64], tau: f64) -> Vec<f64> {
    let y = relaxed_sample(theta, uniforms, tau);
    let ry: f64 = y.iter().zip(r).map(|(a, b)| a * b).sum();
    y.iter().zip(r).map(|(yi, ri)| yi * (ri - ry) / tau).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Estimator {
    Reinforce,
    ReinforceBaseline,
    Gumbel,
    Relax,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Reinforce,
        Estimator::ReinforceBaseline,
        Estimator::Gumbel,
        Estimator::Relax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Reinforce => "reinforce",
            Estimator::ReinforceBaseline => "reinforce-baseline",
            Estimator::Gumbel => "gumbel",
            Estimator::Relax => "relax",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabConfig {
    pub tau: f64,
    pub baseline_decay: f64,
    /// Control-variate training samples before RELAX estimates are kept.
    pub relax_warmup: usize,
    pub control_variate_lr: f64,
    pub control_variate_hidden: usize,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            tau: 0.5,
            baseline_decay: 0.1,
            relax_warmup: 1000,
            control_variate_lr: 0.01,
            control_variate_hidden: ControlVariate::DEFAULT_HIDDEN,
        }
    }
}

/// Draws `n` gradient estimates for `inst`. The REINFORCE baseline starts
/// at 0 and persists across the `n` draws; the RELAX control variate is
/// trained online and, with `warmup`, first on `cfg.relax_warmup` extra
/// draws.
pub fn estimate(
    inst: &BanditInstance,
    estimator: Estimator,
    n: usize,
    cfg: &LabConfig,
    warmup: bool,
    rng: &mut RouteRng,
) -> Result<Vec<Vec<f64>>> {
    assert!(n >= 1, "need at least one sample");
    let k = inst.k();
    let pi = inst.probs();
    let mut out = Vec::with_capacity(n);
    match estimator {
        Estimator::Reinforce | Estimator::ReinforceBaseline => {
            let mut b = 0.0;
            for _ in 0..n {
                let u: Vec<f64> = (0..k).map(|_| rng.sample(Open01)).collect();
                let a = hard_sample(&inst.theta, &u);
                out.push(reinforce_sample(&inst.r, &pi, a, b));
                if estimator == Estimator::ReinforceBaseline {
                    b = (1.0 - cfg.baseline_decay) * b + cfg.baseline_decay * inst.r[a];
                }
            }
        }
        Estimator::Gumbel => {
            for _ in 0..n {
                let u: Vec<f64> = (0..k).map(|_| rng.sample(Open01)).collect();
                out.push(gumbel_sample(&inst.r, &inst.theta, &u, cfg.tau));
            }
        }
        Estimator::Relax => {
            let mut cv_rng = seeded(rng.random());
            let mut cv = ControlVariate::new(k, cfg.control_variate_hidden, &mut cv_rng);
            let warm = if warmup { cfg.relax_warmup } else { 0 };
            for i in 0..warm + n {
                let u: Vec<f64> = (0..k).map(|_| rng.sample(Open01)).collect();
                let v: Vec<f64> = (0..k).map(|_| rng.sample(Open01)).collect();
                let a = hard_sample(&inst.theta, &u);
                let est = relax_estimate(&inst.theta, a, &u, &v, cfg.tau, inst.r[a], &cv)?;
                cv.descend(&est.variance_gradient, cfg.control_variate_lr);
                if i >= warm {
                    out.push(est.gradient);
                }
            }
        }
    }
    Ok(out)
}

/// Per-dimension sample mean and `1/n` variance.
pub fn moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let k = samples[0].len();
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for s in samples {
        for ((q, v), m) in var.iter_mut().zip(s).zip(&mean) {
            *q += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|q| *q /= n);
    (mean, var)
}

/// Statistics of one estimator on one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    /// Mean over samples and dimensions of `(ĝ_i − g_i)²`.
    pub mse: f64,
    /// Mean over dimensions of the `1/n` sample variance.
    pub variance: f64,
    /// `max_i |mean_i − g_i| / SE_i` with `SE_i = s_i/√n`.
    pub max_z: f64,
}

pub fn instance_stats(samples: &[Vec<f64>], truth: &[f64]) -> InstanceStats {
    let n = samples.len() as f64;
    let k = truth.len() as f64;
    let (mean, var) = moments(samples);
    let mse = samples
        .iter()
        .map(|s| s.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / (n * k);
    let max_z = mean
        .iter()
        .zip(&var)
        .zip(truth)
        .map(|((m, v), t)| {
            let se = (v * n / (n - 1.0).max(1.0)).sqrt() / n.sqrt();
            let dev = (m - t).abs();
            if se == 0.0 {
                if dev == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                dev / se
            }
        })
        .fold(0.0, f64::max);
    InstanceStats {
        mse,
        variance: var.iter().sum::<f64>() / k,
        max_z,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub estimator: Estimator,
    pub k: usize,
    pub mse: f64,
    pub variance: f64,
    pub n_samples: usize,
    pub warmup: bool,
    /// Share of instances whose mean deviates by more than 3 standard errors.
    pub bias_detected: f64,
}

impl ReportRow {
    pub fn label(&self) -> String {
        if self.warmup {
            format!("{}+warmup", self.estimator.name())
        } else {
            self.estimator.name().to_string()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EstimatorReport {
    pub rows: Vec<ReportRow>,
}

impl EstimatorReport {
    pub fn row(&self, estimator: Estimator, k: usize, warmup: bool) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.k == k && r.warmup == warmup)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["estimator", "k", "mse", "variance", "n_samples", "warmup"])?;
        for r in &self.rows {
            w.write_record([
                r.label(),
                r.k.to_string(),
                r.mse.to_string(),
                r.variance.to_string(),
                r.n_samples.to_string(),
                r.warmup.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// The protocol variants reported per dimension: each estimator once, and
/// RELAX both with and without control-variate warmup.
pub fn protocol_variants() -> Vec<(Estimator, bool)> {
    vec![
        (Estimator::Reinforce, false),
        (Estimator::ReinforceBaseline, false),
        (Estimator::Gumbel, false),
        (Estimator::Relax, false),
        (Estimator::Relax, true),
    ]
}

/// For each `k`: 22 reward vectors × 22 policies, `22·k` estimates per
/// estimator on each pair. Every pair and estimator draws from its own
/// stream derived from `seed`.
pub fn run_protocol(ks: &[usize], cfg: &LabConfig, seed: u64) -> Result<EstimatorReport> {
    assert!(!ks.is_empty(), "need at least one dimension");
    let mut report = EstimatorReport::default();
    for &k in ks {
        let n = PROTOCOL_DRAWS * k;
        let rewards: Vec<Vec<f64>> = (0..PROTOCOL_DRAWS)
            .map(|i| random_rewards(k, &mut seeded(derive_seed(seed, &[k as u64, 0, i as u64]))))
            .collect();
        let policies: Vec<Vec<f64>> = (0..PROTOCOL_DRAWS)
            .map(|j| random_logits(k, &mut seeded(derive_seed(seed, &[k as u64, 1, j as u64]))))
            .collect();
        for (v, (estimator, warmup)) in protocol_variants().into_iter().enumerate() {
            let mut mse = 0.0;
            let mut variance = 0.0;
            let mut detected = 0usize;
            let mut count = 0usize;
            for (i, r) in rewards.iter().enumerate() {
                for (j, theta) in policies.iter().enumerate() {
                    let inst = BanditInstance::new(r.clone(), theta.clone());
                    let truth = analytic_gradient(&inst);
                    let mut rng = seeded(derive_seed(seed, &[k as u64, 2, i as u64, j as u64, v as u64]));
                    let samples = estimate(&inst, estimator, n, cfg, warmup, &mut rng)?;
                    let s = instance_stats(&samples, &truth);
                    mse += s.mse;
                    variance += s.variance;
                    detected += usize::from(s.max_z > 3.0);
                    count += 1;
                }
            }
            report.rows.push(ReportRow {
                estimator,
                k,
                mse: mse / count as f64,
                variance: variance / count as f64,
                n_samples: n * count,
                warmup,
                bias_detected: detected as f64 / count as f64,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_examples() {
        let g = analytic_gradient(&BanditInstance::new(vec![1.0, 0.0], vec![0.0, 0.0]));
        assert_eq!(g, vec![0.25, -0.25]);
        let g = analytic_gradient(&BanditInstance::new(vec![0.4; 5], vec![0.3, -1.0, 2.0, 0.0, 0.5]));
        assert!(g.iter().all(|v| v.abs() < 1e-16));
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = seeded(1);
        for k in [1, 2, 5, 17, 32] {
            let inst = BanditInstance::random(k, &mut rng);
            let g = analytic_gradient(&inst);
            for i in 0..k {
                let h = 1e-6;
                let mut p = inst.theta.clone();
                p[i] += h;
                let mut m = inst.theta.clone();
                m[i] -= h;
                let numeric = (objective(&inst.r, &p) - objective(&inst.r, &m)) / (2.0 * h);
                assert!((numeric - g[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reinforce_single_action_is_zero() {
        let inst = BanditInstance::new(vec![0.7], vec![0.2]);
        let samples = estimate(
            &inst,
            Estimator::Reinforce,
            50,
            &LabConfig::default(),
            false,
            &mut seeded(0),
        )
        .unwrap();
        assert!(samples.iter().all(|s| s == &vec![0.0]));
        assert_eq!(instance_stats(&samples, &[0.0]).variance, 0.0);
    }

    #[test]
    fn enumeration_is_unbiased_for_any_baseline() {
        let mut rng = seeded(4);
        for k in 1..=6 {
            let inst = BanditInstance::random(k, &mut rng);
            let g = analytic_gradient(&inst);
            for b in [0.0, 0.5, 10.0] {
                for (e, t) in reinforce_expectation(&inst, b).iter().zip(&g) {
                    assert!((e - t).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gumbel_bias_on_seeded_instance() {
        let inst = BanditInstance::random(4, &mut seeded(12));
        let samples = estimate(
            &inst,
            Estimator::Gumbel,
            200_000,
            &LabConfig::default(),
            false,
            &mut seeded(13),
        )
        .unwrap();
        let s = instance_stats(&samples, &analytic_gradient(&inst));
        assert!(s.max_z > 3.0, "max z {}", s.max_z);
    }

    #[test]
    fn reinforce_mse_matches_variance() {
        let mut rng = seeded(5);
        let inst = BanditInstance::random(8, &mut rng);
        let samples = estimate(
            &inst,
            Estimator::Reinforce,
            50_000,
            &LabConfig::default(),
            false,
            &mut rng,
        )
        .unwrap();
        let s = instance_stats(&samples, &analytic_gradient(&inst));
        assert!(
            (s.mse - s.variance).abs() <= 0.1 * s.variance,
            "{} vs {}",
            s.mse,
            s.variance
        );
    }

    #[test]
    fn relax_mean_is_near_truth() {
        let mut rng = seeded(6);
        let inst = BanditInstance::random(4, &mut rng);
        let truth = analytic_gradient(&inst);
        let samples = estimate(&inst, Estimator::Relax, 40_000, &LabConfig::default(), true, &mut rng).unwrap();
        let s = instance_stats(&samples, &truth);
        assert!(s.max_z < 4.5, "max z {}", s.max_z);
    }

    #[test]
    fn protocol_counts_and_csv() {
        let report = run_protocol(&[2], &LabConfig::default(), 3).unwrap();
        assert_eq!(report.rows.len(), protocol_variants().len());
        for row in &report.rows {
            assert_eq!(row.n_samples, 22 * 22 * 44);
        }
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("estimator,k,mse,variance,n_samples,warmup\n"));
        assert_eq!(text.lines().count(), 1 + report.rows.len());
        assert_eq!(report, run_protocol(&[2], &LabConfig::default(), 3).unwrap());
    }
}
