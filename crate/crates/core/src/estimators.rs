//! Normalizer estimators that need no network: the exact oracle, per-batch
//! values, the per-sample moving average, and its mirror-descent form on
//! tabular log-normalizers.

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::objective::{dense_g_values, GclConfig};

/// `eps + g_k(i, S)` for every sample by exhaustive summation.
pub fn oracle_normalizers(e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let (g1, g2) = dense_g_values(e1, e2, cfg.tau)?;
    Ok(shift(g1, g2, cfg.eps))
}

/// `eps + g_k(i, B)` with the batch as the pool.
pub fn minibatch_normalizers(e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    oracle_normalizers(e1, e2, cfg)
}

fn shift(g1: Vec<f64>, g2: Vec<f64>, eps: f64) -> (Vec<f64>, Vec<f64>) {
    (
        g1.into_iter().map(|g| eps + g).collect(),
        g2.into_iter().map(|g| eps + g).collect(),
    )
}

/// Moving-average weight as a function of the step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSchedule {
    Constant(f64),
    /// Cosine decay from `start` to `end` over `steps`, then flat.
    Cosine {
        start: f64,
        end: f64,
        steps: u64,
    },
}

impl GammaSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            GammaSchedule::Constant(g) => g,
            GammaSchedule::Cosine { start, end, steps } => {
                if steps == 0 || step >= steps {
                    return end;
                }
                let frac = step as f64 / steps as f64;
                end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// What to do when a sample's estimate is read before it was ever set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstTouch {
    /// Use weight 1 on the first visit, so the estimate starts at the batch value.
    Initialize,
    /// Refuse to update an uninitialized sample with weight below 1.
    Reject,
}

/// Per-sample moving-average normalizer estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub initialized: Vec<bool>,
    pub first_touch: FirstTouch,
}

impl EmaState {
    pub fn new(n: usize) -> Self {
        EmaState {
            u1: vec![1.0; n],
            u2: vec![1.0; n],
            initialized: vec![false; n],
            first_touch: FirstTouch::Initialize,
        }
    }

    /// Updates the batch samples with weight `gamma`; others are untouched.
    /// `g1`, `g2` are the batch partition terms (pool = batch). Returns the
    /// new batch estimates.
    pub fn update(
        &mut self,
        indices: &[usize],
        g1: &[f64],
        g2: &[f64],
        gamma: f64,
        eps: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if g1.len() != indices.len() || g2.len() != indices.len() {
            return Err(Error::LengthMismatch {
                left: g1.len().min(g2.len()),
                right: indices.len(),
            });
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::NonPositiveInput(format!("gamma {gamma} outside [0, 1]")));
        }
        let mut out1 = Vec::with_capacity(indices.len());
        let mut out2 = Vec::with_capacity(indices.len());
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.u1.len() {
                return Err(Error::DimensionMismatch(format!("sample {i} outside estimator table")));
            }
            let c1 = eps + g1[k];
            let c2 = eps + g2[k];
            if !self.initialized[i] {
                match self.first_touch {
                    FirstTouch::Initialize => {
                        self.u1[i] = c1;
                        self.u2[i] = c2;
                    }
                    FirstTouch::Reject if gamma < 1.0 => return Err(Error::UninitializedSample(i)),
                    FirstTouch::Reject => {
                        self.u1[i] = (1.0 - gamma) * self.u1[i] + gamma * c1;
                        self.u2[i] = (1.0 - gamma) * self.u2[i] + gamma * c2;
                    }
                }
                self.initialized[i] = true;
            } else {
                self.u1[i] = (1.0 - gamma) * self.u1[i] + gamma * c1;
                self.u2[i] = (1.0 - gamma) * self.u2[i] + gamma * c2;
            }
            out1.push(self.u1[i]);
            out2.push(self.u2[i]);
        }
        Ok((out1, out2))
    }
}

/// One mirror-descent step on `ybar = exp(-alpha)` under the Itakura-Saito
/// divergence: `1/ybar' = 1/(1+eta) * 1/ybar + eta/(1+eta) * c`.
pub fn mirror_descent_update(ybar: f64, eta: f64, c: f64) -> Result<f64> {
    if !(ybar > 0.0) {
        return Err(Error::NonPositiveInput(format!("ybar = {ybar}")));
    }
    if !(c > 0.0) {
        return Err(Error::NonPositiveInput(format!("c = {c}")));
    }
    if !(eta >= 0.0) {
        return Err(Error::NonPositiveInput(format!("eta = {eta}")));
    }
    let inv = (1.0 / (1.0 + eta)) * (1.0 / ybar) + (eta / (1.0 + eta)) * c;
    Ok(1.0 / inv)
}

/// Moving-average weight equivalent to mirror step `eta`.
pub fn gamma_from_eta(eta: f64) -> f64 {
    eta / (1.0 + eta)
}

/// Per-sample log-normalizer variables.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularAlpha {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
}

impl TabularAlpha {
    pub fn zeros(n: usize) -> Self {
        TabularAlpha {
            a1: vec![0.0; n],
            a2: vec![0.0; n],
        }
    }

    /// Mirror-descent step for the batch samples; `g` are batch partition terms.
    pub fn mirror_step(&mut self, indices: &[usize], g1: &[f64], g2: &[f64], eta: f64, eps: f64) -> Result<()> {
        for (k, &i) in indices.iter().enumerate() {
            let y1 = mirror_descent_update((-self.a1[i]).exp(), eta, eps + g1[k])?;
            let y2 = mirror_descent_update((-self.a2[i]).exp(), eta, eps + g2[k])?;
            self.a1[i] = -y1.ln();
            self.a2[i] = -y2.ln();
        }
        Ok(())
    }
}

/// How predicted log-normalizers are compared to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorMetric {
    /// `(pred - log(true))^2`.
    #[default]
    LogLog,
    /// `(pred - true)^2`.
    LogRaw,
}

/// Mean squared error between predicted log-normalizers and log of the truth.
pub fn estimation_error(pred_log: &[f64], true_norm: &[f64]) -> Result<f64> {
    estimation_error_with(pred_log, true_norm, ErrorMetric::LogLog)
}

pub fn estimation_error_with(pred_log: &[f64], true_norm: &[f64], metric: ErrorMetric) -> Result<f64> {
    if pred_log.len() != true_norm.len() {
        return Err(Error::LengthMismatch {
            left: pred_log.len(),
            right: true_norm.len(),
        });
    }
    if pred_log.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut s = 0.0;
    for (i, (&p, &t)) in pred_log.iter().zip(true_norm).enumerate() {
        if !(t > 0.0) {
            return Err(Error::NonPositiveTruth(i));
        }
        let target = match metric {
            ErrorMetric::LogLog => t.ln(),
            ErrorMetric::LogRaw => t,
        };
        s += (p - target) * (p - target);
    }
    Ok(s / pred_log.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{dot, Rng};
    use crate::objective::g_values;
    use std::f64::consts::E;

    fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Mat {
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let r: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let nr = dot(&r, &r).sqrt();
            for (o, v) in m.row_mut(i).iter_mut().zip(&r) {
                *o = v / nr;
            }
        }
        m
    }

    #[test]
    fn minibatch_examples() {
        let e = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cfg = GclConfig {
            tau: 1.0,
            tau_min: 0.01,
            eps: 0.0,
            rho: 0.0,
        };
        let (u1, _) = minibatch_normalizers(&e, &e, &cfg).unwrap();
        assert!(u1.iter().all(|u| (u - 1.0 / E).abs() < 1e-15));
        let same = Mat::from_rows(&vec![vec![0.0, 1.0]; 3]).unwrap();
        let (u1, u2) = minibatch_normalizers(&same, &same, &cfg).unwrap();
        assert!(u1.iter().chain(&u2).all(|&u| u == 1.0));
        let cfg_eps = GclConfig { eps: 1e-8, ..cfg };
        let (u1, _) = oracle_normalizers(&same, &same, &cfg_eps).unwrap();
        assert!(u1.iter().all(|&u| u == 1.0 + 1e-8));
        assert!(matches!(
            minibatch_normalizers(&same.gather_rows(&[0]), &same.gather_rows(&[0]), &cfg),
            Err(Error::PoolTooSmall(1))
        ));
    }

    #[test]
    fn oracle_matches_double_loop() {
        let mut rng = Rng::new(77);
        let e1 = unit_rows(3, 4, &mut rng);
        let e2 = unit_rows(3, 4, &mut rng);
        let cfg = GclConfig {
            tau: 0.2,
            ..GclConfig::default()
        };
        let (u1, u2) = oracle_normalizers(&e1, &e2, &cfg).unwrap();
        for i in 0..3 {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 0..3 {
                if j != i {
                    let sii = dot(e1.row(i), e2.row(i));
                    a += ((dot(e1.row(i), e2.row(j)) - sii) / cfg.tau).exp();
                    b += ((dot(e1.row(j), e2.row(i)) - sii) / cfg.tau).exp();
                }
            }
            assert!((u1[i] - (cfg.eps + a / 2.0)).abs() < 1e-14);
            assert!((u2[i] - (cfg.eps + b / 2.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn ema_examples() {
        let mut s = EmaState::new(2);
        s.update(&[0], &[1.0], &[1.0], 1.0, 0.0).unwrap();
        let (u1, _) = s.update(&[0], &[0.36787944], &[1.0], 0.5, 0.0).unwrap();
        assert!((u1[0] - 0.68393972).abs() < 1e-15);
        let (u1, _) = s.update(&[0], &[0.25], &[1.0], 1.0, 0.0).unwrap();
        assert_eq!(u1[0], 0.25);
        let (u1, _) = s.update(&[0], &[9.0], &[1.0], 0.0, 0.0).unwrap();
        assert_eq!(u1[0], 0.25);
        assert_eq!(s.u1[1], 1.0);
        assert!(!s.initialized[1]);
    }

    #[test]
    fn ema_first_touch_policies() {
        let mut s = EmaState::new(3);
        let (u1, u2) = s.update(&[2], &[0.5], &[0.7], 0.3, 1e-8).unwrap();
        assert_eq!((u1[0], u2[0]), (1e-8 + 0.5, 1e-8 + 0.7));
        let mut strict = EmaState {
            first_touch: FirstTouch::Reject,
            ..EmaState::new(3)
        };
        assert!(matches!(
            strict.update(&[1], &[0.5], &[0.5], 0.3, 0.0),
            Err(Error::UninitializedSample(1))
        ));
        assert!(strict.update(&[1], &[0.5], &[0.5], 1.0, 0.0).is_ok());
    }

    #[test]
    fn ema_bias_contracts_by_one_minus_gamma() {
        let mut rng = Rng::new(3);
        let e1 = unit_rows(10, 3, &mut rng);
        let e2 = unit_rows(10, 3, &mut rng);
        let cfg = GclConfig {
            tau: 0.3,
            ..GclConfig::default()
        };
        let all: Vec<usize> = (0..10).collect();
        let (g1, g2) = g_values(&e1, &e2, &cfg, &all, &all).unwrap();
        let gamma = 0.3;
        let mut s = EmaState::new(10);
        for i in 0..10 {
            s.u1[i] = 5.0 + i as f64;
            s.u2[i] = 0.1;
            s.initialized[i] = true;
        }
        let mut prev: Vec<f64> = (0..10).map(|i| s.u1[i] - (cfg.eps + g1[i])).collect();
        for _ in 0..15 {
            s.update(&all, &g1, &g2, gamma, cfg.eps).unwrap();
            for i in 0..10 {
                let gap = s.u1[i] - (cfg.eps + g1[i]);
                assert!((gap - (1.0 - gamma) * prev[i]).abs() <= 1e-12 * prev[i].abs().max(1.0));
                prev[i] = gap;
            }
        }
    }

    #[test]
    fn mirror_descent_examples() {
        assert_eq!(gamma_from_eta(1.0), 0.5);
        let y = mirror_descent_update(1.0, 1.0, 0.36787944).unwrap();
        assert!((1.0 / y - 0.68393972).abs() < 1e-15);
        assert_eq!(mirror_descent_update(0.4, 0.0, 3.0).unwrap(), 0.4);
        assert!((mirror_descent_update(0.4, 1e-12, 3.0).unwrap() - 0.4).abs() < 1e-12);
        assert!(mirror_descent_update(0.0, 1.0, 1.0).is_err());
        assert!(mirror_descent_update(1.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn mirror_descent_equals_ema() {
        let mut rng = Rng::new(12);
        for _ in 0..10_000 {
            let ybar = (rng.uniform_range(-5.0, 5.0)).exp();
            let eta = (rng.uniform_range(-4.0, 4.0)).exp();
            let c = (rng.uniform_range(-8.0, 8.0)).exp();
            let y = mirror_descent_update(ybar, eta, c).unwrap();
            let mut s = EmaState::new(1);
            s.u1[0] = 1.0 / ybar;
            s.initialized[0] = true;
            let (u, _) = s.update(&[0], &[c], &[c], gamma_from_eta(eta), 0.0).unwrap();
            assert!((1.0 / y - u[0]).abs() <= 1e-12 * u[0].max(1.0));
        }
    }

    #[test]
    fn tabular_mirror_step_tracks_ema() {
        let mut t = TabularAlpha::zeros(2);
        let mut s = EmaState::new(2);
        s.initialized = vec![true, true];
        for c in [0.3, 2.0, 0.9] {
            t.mirror_step(&[0, 1], &[c, c], &[c, c], 1.0, 0.0).unwrap();
            s.update(&[0, 1], &[c, c], &[c, c], 0.5, 0.0).unwrap();
        }
        assert!((t.a1[0] - s.u1[0].ln()).abs() < 1e-12);
    }

    #[test]
    fn estimation_error_examples() {
        assert_eq!(estimation_error(&[0.0, -1.0], &[1.0, (-1f64).exp()]).unwrap(), 0.0);
        assert_eq!(estimation_error(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(estimation_error(&[2.5f64.ln()], &[2.5]).unwrap(), 0.0);
        assert!(matches!(
            estimation_error(&[0.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(matches!(
            estimation_error(&[0.0], &[0.0]),
            Err(Error::NonPositiveTruth(0))
        ));
        assert_eq!(estimation_error_with(&[2.0], &[2.0], ErrorMetric::LogRaw).unwrap(), 0.0);
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(GammaSchedule::Constant(0.8).at(1000), 0.8);
        let c = GammaSchedule::Cosine {
            start: 1.0,
            end: 0.2,
            steps: 100,
        };
        assert!((c.at(0) - 1.0).abs() < 1e-15);
        assert!((c.at(50) - 0.6).abs() < 1e-12);
        assert_eq!(c.at(100), 0.2);
    }

    proptest::proptest! {
        #[test]
        fn estimation_error_nonnegative(
            pairs in proptest::collection::vec((-20.0f64..20.0, 1e-6f64..1e6), 1..20)
        ) {
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let err = estimation_error(&pred, &truth).unwrap();
            proptest::prop_assert!(err >= 0.0);
            let exact: Vec<f64> = truth.iter().map(|t| t.ln()).collect();
            proptest::prop_assert_eq!(estimation_error(&exact, &truth).unwrap(), 0.0);
        }
    }
}
