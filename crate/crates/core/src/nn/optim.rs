use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Cosine annealing from `lr0` at step 0 down to `eta_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Argument("cosine schedule needs total >= 1".into()));
    }
    if step > total {
        return Err(Error::Argument(format!(
            "cosine schedule step {step} beyond total {total}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr0 - eta_min) * (1.0 + phase.cos()))
}

/// Hyperparameters of SGD with momentum, weight decay and cosine annealing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta_min: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta_min: 1e-6,
        }
    }
}

/// SGD state for one trainable slice.
///
/// Update: `v <- m v + (g + wd theta)`, `theta <- theta - lr(t) v`.
#[derive(Debug, Clone)]
pub struct OptimizerState<S> {
    pub velocity: Vec<S>,
    pub config: SgdConfig,
    pub step: usize,
    pub total_steps: usize,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(len: usize, config: SgdConfig, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Argument("optimizer needs total_steps >= 1".into()));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Argument(format!(
                "momentum {} outside [0, 1)",
                config.momentum
            )));
        }
        if config.weight_decay < 0.0 || config.eta_min < 0.0 {
            return Err(Error::Argument(
                "weight decay and eta_min must be >= 0".into(),
            ));
        }
        Ok(Self {
            velocity: vec![S::zero(); len],
            config,
            step: 0,
            total_steps,
        })
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(
            self.step,
            self.total_steps,
            self.config.lr,
            self.config.eta_min,
        )
    }

    pub fn step(&mut self, params: &mut [S], grad: &[S]) -> Result<()> {
        if grad.len() != params.len() || params.len() != self.velocity.len() {
            return Err(Error::shape(
                "SGD gradient",
                self.velocity.len(),
                grad.len(),
            ));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: "SGD gradient".into(),
                index: i,
            });
        }
        if self.step >= self.total_steps {
            return Err(Error::State(format!(
                "optimizer already took all {} scheduled steps",
                self.total_steps
            )));
        }
        let lr = S::of(self.current_lr()?);
        let m = S::of(self.config.momentum);
        let wd = S::of(self.config.weight_decay);
        for ((p, v), &g) in params.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = m * *v + (g + wd * *p);
            *p -= lr * *v;
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn plain(lr: f64, momentum: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay: 0.0,
            eta_min: lr,
        }
    }

    #[test]
    fn plain_gradient_step() {
        let mut opt = OptimizerState::<f64>::new(1, plain(0.1, 0.0), 10).unwrap();
        let mut theta = [1.0];
        opt.step(&mut theta, &[2.0]).unwrap();
        assert_abs_diff_eq!(theta[0], 0.8, epsilon = 1e-15);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_gradient_decays_buffer_only() {
        let mut opt = OptimizerState::<f64>::new(1, plain(0.1, 0.9), 10).unwrap();
        opt.velocity[0] = 0.0;
        let mut theta = [3.0];
        opt.step(&mut theta, &[0.0]).unwrap();
        assert_eq!(theta[0], 3.0);
        opt.velocity[0] = 1.0;
        let mut theta = [3.0];
        opt.step(&mut theta, &[0.0]).unwrap();
        assert_abs_diff_eq!(opt.velocity[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn two_momentum_steps_match_hand_unrolling() {
        // v1 = g = 1, theta1 = 1 - 0.1 * 1 = 0.9
        // v2 = 0.9 * 1 + 1 = 1.9, theta2 = 0.9 - 0.1 * 1.9 = 0.71
        let mut opt = OptimizerState::<f64>::new(1, plain(0.1, 0.9), 10).unwrap();
        let mut theta = [1.0];
        opt.step(&mut theta, &[1.0]).unwrap();
        assert_abs_diff_eq!(theta[0], 0.9, epsilon = 1e-15);
        opt.step(&mut theta, &[1.0]).unwrap();
        assert_abs_diff_eq!(opt.velocity[0], 1.9, epsilon = 1e-15);
        assert_abs_diff_eq!(theta[0], 0.71, epsilon = 1e-15);
    }

    #[test]
    fn weight_decay_enters_momentum() {
        let cfg = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.1,
            eta_min: 0.5,
        };
        let mut opt = OptimizerState::<f64>::new(1, cfg, 1).unwrap();
        let mut theta = [2.0];
        opt.step(&mut theta, &[1.0]).unwrap();
        assert_abs_diff_eq!(theta[0], 2.0 - 0.5 * 1.2, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_component() {
        let mut opt = OptimizerState::<f64>::new(3, SgdConfig::default(), 5).unwrap();
        let err = opt.step(&mut [0.0; 3], &[0.0, 1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1e-2, 1e-6).unwrap(), 1e-2);
        assert_abs_diff_eq!(
            cosine_lr(100, 100, 1e-2, 1e-6).unwrap(),
            1e-6,
            epsilon = 1e-18
        );
        // eta_min + (lr0 - eta_min) / 2
        assert_abs_diff_eq!(
            cosine_lr(50, 100, 1e-2, 1e-6).unwrap(),
            5.0005e-3,
            epsilon = 1e-15
        );
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn cosine_is_non_increasing(total in 1usize..5000, lr0 in 1e-6f64..1.0, frac in 0.0f64..1.0) {
            let eta_min = lr0 * frac;
            for step in 0..total.min(400) {
                let s = step * (total / total.min(400)).max(1);
                if s + 1 > total { break; }
                prop_assert!(cosine_lr(s, total, lr0, eta_min).unwrap() >= cosine_lr(s + 1, total, lr0, eta_min).unwrap());
            }
        }
    }
}
