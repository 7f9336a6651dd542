//! Training loops for the four methods. All of them share one skeleton:
//! embed the batch, form an embedding/temperature gradient from some
//! normalizer estimate, pull it back through the encoder, take an optimizer
//! step, and project the temperature onto `tau >= tau_min`.
//!
//! The temperature is optimized as `kappa = log tau` with its own AdamW
//! instance.

pub mod sampler;

use crate::encoders::{encode, encode_backward, EmbeddingBatch, EncoderParams, RawViews};
use crate::error::{Error, Result};
use crate::estimators::{EmaState, GammaSchedule};
use crate::npn::{NpnArch, NpnObjective, NpnParams};
use crate::numerics::{checksum, Rng};
use crate::objective::{normalizer_weighted_grad, unified_grad_dense, AlphaFlow, GclConfig, ObjectiveGrad, PairTerms};
use crate::optim::{OptimConfig, OptimizerState};

pub use sampler::EpochSampler;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Minibatch,
    FastClip,
    NeuClip,
    Simultaneous,
}

impl Method {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "minibatch" => Some(Method::Minibatch),
            "fastclip" => Some(Method::FastClip),
            "neuclip" => Some(Method::NeuClip),
            "simultaneous" => Some(Method::Simultaneous),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Minibatch => "minibatch",
            Method::FastClip => "fastclip",
            Method::NeuClip => "neuclip",
            Method::Simultaneous => "simultaneous",
        }
    }
}

/// Everything a trainer needs besides data and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub method: Method,
    /// Loss constants; `gcl.tau` is the initial temperature.
    pub gcl: GclConfig,
    pub batch_size: usize,
    pub gamma: GammaSchedule,
    /// Restart period; `None` never restarts.
    pub t_r: Option<u64>,
    pub t_u: usize,
    pub npn_arch: NpnArch,
    /// Prototype count, or MLP hidden width.
    pub npn_width: usize,
    pub npn_objective: NpnObjective,
    /// Let the embedding gradient flow through the predicted log-normalizers
    /// (alternating method only; the simultaneous method always does).
    pub flow_through_alpha: bool,
    pub encoder_opt: OptimConfig,
    pub tau_lr: f64,
    pub npn_opt: OptimConfig,
    /// Zero the network optimizer's accumulators whenever prototypes restart.
    pub reset_npn_opt_on_restart: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: Method::Minibatch,
            gcl: GclConfig::default(),
            batch_size: 128,
            gamma: GammaSchedule::Constant(0.8),
            t_r: Some(500),
            t_u: 10,
            npn_arch: NpnArch::Prototype,
            npn_width: 256,
            npn_objective: NpnObjective::Unified,
            flow_through_alpha: false,
            encoder_opt: OptimConfig::adamw(1e-3, 0.1),
            tau_lr: 1.25e-4,
            npn_opt: OptimConfig::adagrad(1.0, 0.0),
            reset_npn_opt_on_restart: true,
        }
    }
}

/// Per-method normalizer state.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    None,
    Ema(EmaState),
    Npn { net: NpnParams, opt: OptimizerState },
}

/// Full training state; two states built from the same inputs evolve
/// bitwise identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: EncoderParams,
    pub kappa: f64,
    pub estimator: Estimator,
    pub enc_opt: OptimizerState,
    pub tau_opt: OptimizerState,
    pub step: u64,
    pub sampler: EpochSampler,
    pub restart_rng: Rng,
}

/// Stream ids carved out of the run seed.
pub const STREAM_ENCODER: u64 = 0;
pub const STREAM_SAMPLER: u64 = 1;
pub const STREAM_RESTART: u64 = 2;
pub const STREAM_NPN: u64 = 3;

impl TrainState {
    pub fn new(cfg: &TrainerConfig, encoder: EncoderParams, n: usize, seed: u64) -> Result<Self> {
        if !(cfg.gcl.tau >= cfg.gcl.tau_min && cfg.gcl.tau_min > 0.0) {
            return Err(Error::config("tau", "need tau >= tau_min > 0"));
        }
        if cfg.t_u == 0 {
            return Err(Error::config("npn.t_u", "must be at least 1"));
        }
        if cfg.t_r == Some(0) {
            return Err(Error::config("npn.t_r", "must be at least 1"));
        }
        let sampler = EpochSampler::new(n, cfg.batch_size, Rng::with_stream(seed, STREAM_SAMPLER))?;
        let d = encoder.dim();
        let estimator = match cfg.method {
            Method::Minibatch => Estimator::None,
            Method::FastClip => Estimator::Ema(EmaState::new(n)),
            Method::NeuClip | Method::Simultaneous => {
                if cfg.npn_width == 0 {
                    return Err(Error::config("npn.m", "must be at least 1"));
                }
                let net = NpnParams::init(cfg.npn_arch, d, cfg.npn_width, &mut Rng::with_stream(seed, STREAM_NPN));
                let ocfg = if cfg.method == Method::NeuClip {
                    cfg.npn_opt
                } else {
                    cfg.encoder_opt
                };
                let opt = OptimizerState::new(ocfg, net.len());
                Estimator::Npn { net, opt }
            }
        };
        let enc_opt = OptimizerState::new(cfg.encoder_opt, encoder.len());
        Ok(TrainState {
            kappa: cfg.gcl.tau.ln(),
            encoder,
            estimator,
            enc_opt,
            tau_opt: OptimizerState::new(OptimConfig::adamw(cfg.tau_lr, 0.0), 1),
            step: 0,
            sampler,
            restart_rng: Rng::with_stream(seed, STREAM_RESTART),
        })
    }

    pub fn tau(&self) -> f64 {
        self.kappa.exp()
    }

    pub fn samples_seen(&self) -> u64 {
        self.step * self.sampler.batch as u64
    }

    /// Fingerprint of every trainable value.
    pub fn checksum(&self) -> u64 {
        let mut v = self.encoder.values.clone();
        v.push(self.kappa);
        match &self.estimator {
            Estimator::None => {}
            Estimator::Ema(s) => {
                v.extend(&s.u1);
                v.extend(&s.u2);
            }
            Estimator::Npn { net, .. } => v.extend(&net.values),
        }
        checksum(&v)
    }

    /// Samples a batch and runs one step of the configured method.
    pub fn step(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>) -> Result<()> {
        let batch = self.sampler.next_batch();
        self.step_on(cfg, raw, &batch)
    }

    /// One step on a given batch.
    pub fn step_on(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>, batch: &[usize]) -> Result<()> {
        match cfg.method {
            Method::Minibatch => self.step_minibatch(cfg, raw, batch),
            Method::FastClip => self.step_fastclip(cfg, raw, batch),
            Method::NeuClip => self.step_neuclip(cfg, raw, batch),
            Method::Simultaneous => self.step_simultaneous(cfg, raw, batch),
        }
    }

    fn current(&self, cfg: &TrainerConfig) -> GclConfig {
        cfg.gcl.with_tau(self.tau())
    }

    /// Per-batch loss gradient: normalizers are the batch values themselves.
    pub fn step_minibatch(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>, batch: &[usize]) -> Result<()> {
        let gcl = self.current(cfg);
        let emb = encode(&self.encoder, raw, batch)?;
        let terms = PairTerms::new(&emb.e1, &emb.e2, gcl.tau)?;
        let u1: Vec<f64> = terms.g1.iter().map(|g| gcl.eps + g).collect();
        let u2: Vec<f64> = terms.g2.iter().map(|g| gcl.eps + g).collect();
        let grad = normalizer_weighted_grad(&terms, &emb.e1, &emb.e2, &gcl, &u1, &u2)?;
        self.apply_model_grad(cfg, &emb, &grad, None)?;
        self.step += 1;
        Ok(())
    }

    /// Moving-average normalizers, updated before the gradient is formed.
    pub fn step_fastclip(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>, batch: &[usize]) -> Result<()> {
        let gcl = self.current(cfg);
        let emb = encode(&self.encoder, raw, batch)?;
        let terms = PairTerms::new(&emb.e1, &emb.e2, gcl.tau)?;
        let gamma = cfg.gamma.at(self.step);
        let Estimator::Ema(ema) = &mut self.estimator else {
            return Err(Error::config("method", "fastclip needs a moving-average estimator"));
        };
        // Work on a copy so a failed step leaves the state untouched.
        let mut next = ema.clone();
        let (u1, u2) = next.update(batch, &terms.g1, &terms.g2, gamma, gcl.eps)?;
        let grad = normalizer_weighted_grad(&terms, &emb.e1, &emb.e2, &gcl, &u1, &u2)?;
        self.apply_model_grad(cfg, &emb, &grad, None)?;
        self.estimator = Estimator::Ema(next);
        self.step += 1;
        Ok(())
    }

    /// Alternating method: optional restart, `t_u` network updates on the
    /// batch, then one model step with the refreshed log-normalizers.
    pub fn step_neuclip(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>, batch: &[usize]) -> Result<()> {
        let gcl = self.current(cfg);
        let emb = encode(&self.encoder, raw, batch)?;
        let Estimator::Npn { net, opt } = &self.estimator else {
            return Err(Error::config("method", "neuclip needs a normalizer network"));
        };
        let mut net = net.clone();
        let mut opt = opt.clone();
        let mut restart_rng = self.restart_rng.clone();
        if cfg.t_r.is_some_and(|r| self.step.is_multiple_of(r)) {
            net.restart(&emb.e1, &emb.e2, &mut restart_rng)?;
            if cfg.reset_npn_opt_on_restart {
                opt.reset();
            }
        }
        net.multi_update(&emb.e1, &emb.e2, &gcl, cfg.npn_objective, &mut opt, cfg.t_u)?;
        let (a1, a2) = net.forward(&emb.e1, &emb.e2, &gcl)?;
        let terms = PairTerms::new(&emb.e1, &emb.e2, gcl.tau)?;
        let flow = if cfg.flow_through_alpha {
            AlphaFlow::Through(&net)
        } else {
            AlphaFlow::Detached
        };
        let ug = unified_grad_dense(&terms, &emb.e1, &emb.e2, &a1, &a2, &gcl, flow)?;
        let grad = ObjectiveGrad {
            de1: ug.de1,
            de2: ug.de2,
            dtau: ug.dtau,
        };
        self.apply_model_grad(cfg, &emb, &grad, None)?;
        self.estimator = Estimator::Npn { net, opt };
        self.restart_rng = restart_rng;
        self.step += 1;
        Ok(())
    }

    /// Joint step on encoder, temperature and networks from one gradient of
    /// the unified objective, with the embedding gradient including the path
    /// through the predicted log-normalizers.
    pub fn step_simultaneous(&mut self, cfg: &TrainerConfig, raw: RawViews<'_>, batch: &[usize]) -> Result<()> {
        let gcl = self.current(cfg);
        let emb = encode(&self.encoder, raw, batch)?;
        let Estimator::Npn { net, opt } = &self.estimator else {
            return Err(Error::config("method", "simultaneous needs a normalizer network"));
        };
        let (a1, a2) = net.forward(&emb.e1, &emb.e2, &gcl)?;
        let terms = PairTerms::new(&emb.e1, &emb.e2, gcl.tau)?;
        let ug = unified_grad_dense(&terms, &emb.e1, &emb.e2, &a1, &a2, &gcl, AlphaFlow::Through(net))?;
        let dw = net.param_vjp(&emb.e1, &emb.e2, &gcl, &ug.da1, &ug.da2)?;
        let mut net = net.clone();
        let mut opt = opt.clone();
        let grad = ObjectiveGrad {
            de1: ug.de1,
            de2: ug.de2,
            dtau: ug.dtau,
        };
        self.apply_model_grad(cfg, &emb, &grad, Some((&mut net, &mut opt, &dw)))?;
        self.estimator = Estimator::Npn { net, opt };
        self.step += 1;
        Ok(())
    }

    /// Pulls `grad` back through the encoder and updates encoder and
    /// temperature, plus the network when `joint` is given. All gradients
    /// are checked before any parameter changes.
    pub fn apply_model_grad(
        &mut self,
        cfg: &TrainerConfig,
        emb: &EmbeddingBatch,
        grad: &ObjectiveGrad,
        joint: Option<(&mut NpnParams, &mut OptimizerState, &[f64])>,
    ) -> Result<()> {
        let enc_grad = encode_backward(&self.encoder, emb, &grad.de1, &grad.de2)?;
        if let Some(i) = enc_grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: self.encoder.block_of(i),
            });
        }
        let dkappa = grad.dtau * self.tau();
        if !dkappa.is_finite() {
            return Err(Error::NonFiniteGradient { block: "tau".into() });
        }
        if let Some((net, _, dw)) = &joint {
            if let Some(i) = dw.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: net.block_of(i).into(),
                });
            }
        }
        self.enc_opt.step(&mut self.encoder.values, &enc_grad, "encoder")?;
        self.tau_opt
            .step(std::slice::from_mut(&mut self.kappa), &[dkappa], "tau")?;
        project_kappa(&mut self.kappa, cfg.gcl.tau_min);
        if let Some((net, opt, dw)) = joint {
            net.apply(opt, dw)?;
        }
        Ok(())
    }
}

/// Smallest `kappa` change that guarantees `exp(kappa) >= tau_min`.
pub fn project_kappa(kappa: &mut f64, tau_min: f64) {
    let floor = tau_min.ln();
    if *kappa < floor {
        *kappa = floor;
    }
    while kappa.exp() < tau_min {
        *kappa = kappa.next_up();
    }
}
