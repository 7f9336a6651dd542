//! First-order optimizers over flat parameter slices.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    AdaGrad,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adamw" => Some(OptimizerKind::AdamW),
            "adagrad" => Some(OptimizerKind::AdaGrad),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::AdamW => "adamw",
            OptimizerKind::AdaGrad => "adagrad",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::AdamW,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adagrad(lr: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::AdaGrad,
            lr,
            weight_decay,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-10,
        }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        OptimConfig {
            kind: OptimizerKind::Sgd,
            lr,
            weight_decay,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
        }
    }

    /// Defaults for `kind` with the given rate and decay.
    pub fn of(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::AdamW => Self::adamw(lr, weight_decay),
            OptimizerKind::AdaGrad => Self::adagrad(lr, weight_decay),
            OptimizerKind::Sgd => Self::sgd(lr, weight_decay),
        }
    }
}

/// Optimizer with per-parameter accumulators. `m` is unused by AdaGrad and
/// SGD; `v` holds AdaGrad's running sum of squares.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub cfg: OptimConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(cfg: OptimConfig, len: usize) -> Self {
        OptimizerState {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    /// Applies one update in place. `block` names the parameters in errors.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], block: &str) -> Result<()> {
        if params.len() != grad.len() || params.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: grad.len(),
                right: params.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: block.to_string(),
            });
        }
        self.t += 1;
        let c = self.cfg;
        match c.kind {
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - c.beta1.powi(self.t as i32);
                let bc2 = 1.0 - c.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    params[i] *= 1.0 - c.lr * c.weight_decay;
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                    let mh = self.m[i] / bc1;
                    let vh = self.v[i] / bc2;
                    params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                }
            }
            OptimizerKind::AdaGrad => {
                for i in 0..params.len() {
                    let g = grad[i] + c.weight_decay * params[i];
                    self.v[i] += g * g;
                    params[i] -= c.lr * g / (self.v[i].sqrt() + c.eps);
                }
            }
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    let g = grad[i] + c.weight_decay * params[i];
                    params[i] -= c.lr * g;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        for cfg in [
            OptimConfig::adamw(0.1, 0.0),
            OptimConfig::adagrad(1.0, 0.0),
            OptimConfig::sgd(0.5, 0.0),
        ] {
            let mut s = OptimizerState::new(cfg, 3);
            let mut p = vec![1.0, -2.0, 3.0];
            s.step(&mut p, &[0.0; 3], "x").unwrap();
            assert_eq!(p, vec![1.0, -2.0, 3.0]);
        }
    }

    #[test]
    fn adagrad_first_step() {
        let mut s = OptimizerState::new(OptimConfig::adagrad(1.0, 0.0), 3);
        let mut p = vec![0.0; 3];
        let g = [0.5, -3.0, 1e-3];
        s.step(&mut p, &g, "npn").unwrap();
        for i in 0..3 {
            assert_eq!(p[i], -g[i] / (g[i].abs() + 1e-10));
        }
    }

    #[test]
    fn adagrad_accumulator_non_decreasing() {
        let mut s = OptimizerState::new(OptimConfig::adagrad(0.1, 0.01), 2);
        let mut p = vec![1.0, 1.0];
        let mut prev = s.v.clone();
        for k in 0..20 {
            let g = [(k as f64).sin(), -(k as f64).cos()];
            s.step(&mut p, &g, "npn").unwrap();
            assert!(s.v.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = s.v.clone();
        }
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut s = OptimizerState::new(OptimConfig::adamw(0.01, 0.0), 2);
        let mut p = vec![0.0, 0.0];
        s.step(&mut p, &[2.0, -0.5], "enc").unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut s = OptimizerState::new(OptimConfig::adamw(0.1, 0.5), 1);
        let mut p = vec![2.0];
        s.step(&mut p, &[0.0], "enc").unwrap();
        assert_eq!(p[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut s = OptimizerState::new(OptimConfig::sgd(0.1, 0.0), 2);
        let mut p = vec![0.0; 2];
        match s.step(&mut p, &[1.0, f64::NAN], "encoder.text.weight") {
            Err(Error::NonFiniteGradient { block }) => assert_eq!(block, "encoder.text.weight"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p, vec![0.0; 2]);
        assert_eq!(s.t, 0);
    }
}
