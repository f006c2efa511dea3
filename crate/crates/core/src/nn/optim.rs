use super::param::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    PlainSgd,
    Momentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::PlainSgd,
            learning_rate,
        }
    }

    pub fn with_learning_rate(self, learning_rate: f64) -> Self {
        OptimizerConfig { learning_rate, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        match self.kind {
            OptimizerKind::PlainSgd => Ok(()),
            OptimizerKind::Momentum { momentum } => unit("momentum", momentum),
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if epsilon > 0.0 {
                    Ok(())
                } else {
                    Err(Error::config("adam epsilon must be positive"))
                }
            }
        }
    }
}

/// Applies one update with effective rate `learning_rate · multiplier`,
/// then zeroes the gradients.
///
/// All gradients are checked before any parameter moves, so a non-finite
/// gradient leaves every parameter untouched.
pub fn optimizer_step(params: &[Parameter], config: &OptimizerConfig, multiplier: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&multiplier) {
        return Err(Error::config(format!(
            "learning-rate multiplier must lie in [0, 1], got {multiplier}"
        )));
    }
    for p in params {
        if p.with_data_mut(|d| d.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::NonFiniteGradient(p.name()));
        }
    }
    let rate = config.learning_rate * multiplier;
    for p in params {
        p.with_data_mut(|d| {
            let values = d.value.data_mut();
            match config.kind {
                OptimizerKind::PlainSgd => {
                    for (v, g) in values.iter_mut().zip(&d.grad) {
                        *v -= rate * g;
                    }
                }
                OptimizerKind::Momentum { momentum } => {
                    for ((v, g), vel) in values.iter_mut().zip(&d.grad).zip(d.velocity.iter_mut()) {
                        *vel = momentum * *vel + g;
                        *v -= rate * *vel;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    d.steps += 1;
                    let c1 = 1.0 - beta1.powi(d.steps as i32);
                    let c2 = 1.0 - beta2.powi(d.steps as i32);
                    for i in 0..values.len() {
                        let g = d.grad[i];
                        d.first_moment[i] = beta1 * d.first_moment[i] + (1.0 - beta1) * g;
                        d.second_moment[i] = beta2 * d.second_moment[i] + (1.0 - beta2) * g * g;
                        let m_hat = d.first_moment[i] / c1;
                        let v_hat = d.second_moment[i] / c2;
                        values[i] -= rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
            d.grad.iter_mut().for_each(|g| *g = 0.0);
            if d.value.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite {
                    op: format!("optimizer step on `{}`", d.name),
                })
            }
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(v: f64, g: f64) -> Parameter {
        let p = Parameter::new("theta", Tensor::scalar(v).unwrap());
        p.accumulate_grad(&[g]);
        p
    }

    #[test]
    fn plain_sgd_step() {
        let p = param(1.0, 2.0);
        optimizer_step(&[p.clone()], &OptimizerConfig::sgd(0.1), 1.0).unwrap();
        assert!((p.value().data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad(), vec![0.0]);
    }

    #[test]
    fn zero_multiplier_leaves_values() {
        for kind in [
            OptimizerKind::PlainSgd,
            OptimizerKind::Momentum { momentum: 0.9 },
            OptimizerKind::adam(),
        ] {
            let p = param(1.0, 2.0);
            let cfg = OptimizerConfig {
                kind,
                learning_rate: 0.1,
            };
            optimizer_step(&[p.clone()], &cfg, 0.0).unwrap();
            assert_eq!(p.value().data(), &[1.0]);
        }
    }

    #[test]
    fn multiplier_equals_scaled_learning_rate_for_sgd() {
        for (lr, m) in [(0.1, 0.5), (0.37, 0.123), (1e-3, 0.999)] {
            let a = param(0.7, -1.3);
            let b = param(0.7, -1.3);
            optimizer_step(&[a.clone()], &OptimizerConfig::sgd(lr), m).unwrap();
            optimizer_step(&[b.clone()], &OptimizerConfig::sgd(lr * m), 1.0).unwrap();
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g|+ε).
        for g in [1e-3, 0.5, 2.0, 300.0] {
            let p = param(0.0, g);
            let cfg = OptimizerConfig {
                kind: OptimizerKind::adam(),
                learning_rate: 0.01,
            };
            optimizer_step(&[p.clone()], &cfg, 1.0).unwrap();
            let expected = -0.01 * g / (g + 1e-8);
            assert!((p.value().data()[0] - expected).abs() < 1e-15);
            assert!((p.value().data()[0].abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let p = param(0.0, 1.0);
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Momentum { momentum: 0.5 },
            learning_rate: 0.1,
        };
        optimizer_step(&[p.clone()], &cfg, 1.0).unwrap();
        p.accumulate_grad(&[1.0]);
        optimizer_step(&[p.clone()], &cfg, 1.0).unwrap();
        // -0.1·1 then -0.1·1.5
        assert!((p.value().data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let good = param(1.0, 1.0);
        let bad = Parameter::new("router.w", Tensor::scalar(1.0).unwrap());
        bad.accumulate_grad(&[f64::INFINITY]);
        let err = optimizer_step(&[good.clone(), bad], &OptimizerConfig::sgd(0.1), 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "router.w"));
        assert_eq!(good.value().data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::sgd(0.0).validate().is_err());
        assert!(OptimizerConfig {
            kind: OptimizerKind::Momentum { momentum: 1.0 },
            learning_rate: 0.1
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            kind: OptimizerKind::adam(),
            learning_rate: 0.1
        }
        .validate()
        .is_ok());
    }
}
