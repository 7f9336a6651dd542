//! Run configuration: UTF-8 `key = value` lines, `#` starts a comment.
//! Unknown and repeated keys are errors.

use std::path::{Path, PathBuf};

use crate::encoders::EncoderKind;
use crate::error::{Error, Result};
use crate::estimators::GammaSchedule;
use crate::harness::synthetic::SyntheticSpec;
use crate::npn::{NpnArch, NpnObjective};
use crate::optim::{OptimConfig, OptimizerKind};
use crate::trainers::{Method, TrainerConfig};

/// Where the training pairs come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub seed: u64,
    pub steps: u64,
    pub eval_every: u64,
    /// Extra checkpoints every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub data: DataSource,
    pub encoder_kind: EncoderKind,
    pub encoder_dim: usize,
    pub encoder_hidden: usize,
    pub output_dir: Option<PathBuf>,
    /// Wall-clock times make logs differ between reruns, so they are off by
    /// default and `wall_ms` is written as 0.
    pub record_wall_time: bool,
    gamma_kind: GammaKind,
    gamma_start: f64,
    gamma_end: f64,
    gamma_steps: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GammaKind {
    Constant,
    Cosine,
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "method",
    "seed",
    "steps",
    "batch_size",
    "eval_every",
    "checkpoint_every",
    "flow_through_alpha",
    "data.path",
    "data.n",
    "data.k",
    "data.d_latent",
    "data.d_raw_image",
    "data.d_raw_text",
    "data.sigma",
    "data.seed",
    "encoder.kind",
    "encoder.dim",
    "encoder.hidden",
    "encoder.optimizer",
    "encoder.lr",
    "encoder.wd",
    "tau.init",
    "tau.min",
    "tau.lr",
    "loss.eps",
    "loss.rho",
    "fastclip.gamma",
    "fastclip.gamma_schedule",
    "fastclip.gamma_end",
    "fastclip.gamma_decay_steps",
    "npn.arch",
    "npn.m",
    "npn.t_r",
    "npn.t_u",
    "npn.objective",
    "npn.optimizer",
    "npn.lr",
    "npn.wd",
    "npn.reset_optimizer_on_restart",
    "output.dir",
    "output.record_wall_time",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            trainer: TrainerConfig::default(),
            seed: 0,
            steps: 1000,
            eval_every: 100,
            checkpoint_every: 0,
            data: DataSource::Synthetic(SyntheticSpec {
                n: 1024,
                ..SyntheticSpec::default()
            }),
            encoder_kind: EncoderKind::Linear,
            encoder_dim: 16,
            encoder_hidden: 32,
            output_dir: None,
            record_wall_time: false,
            gamma_kind: GammaKind::Constant,
            gamma_start: 0.8,
            gamma_end: 0.8,
            gamma_steps: 0,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{v}` as a number")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(Error::config(key, "must be finite"));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{v}`"))),
    }
}

fn parse_optimizer(key: &str, v: &str) -> Result<OptimizerKind> {
    OptimizerKind::parse(v).ok_or_else(|| Error::config(key, format!("unknown optimizer `{v}` (adamw, adagrad, sgd)")))
}

/// Splits `text` into `(line number, key, value)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::config(
                format!("line {}", no + 1),
                format!("expected `key = value`, got `{line}`"),
            ));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}", no + 1), "empty key"));
        }
        if out.iter().any(|(_, key, _): &(usize, String, String)| key == k) {
            return Err(Error::config(k, "key given more than once"));
        }
        out.push((no + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Parses config text. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (_, k, v) in parse_pairs(text)? {
            cfg.set(&k, &v, base)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    fn synthetic(&mut self, key: &str) -> Result<&mut SyntheticSpec> {
        match &mut self.data {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::File(_) => Err(Error::config(key, "cannot combine with data.path")),
        }
    }

    /// Applies one key. Does not re-validate the whole config.
    pub fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        let t = &mut self.trainer;
        match key {
            "method" => {
                t.method = Method::parse(v).ok_or_else(|| {
                    Error::config(
                        key,
                        format!("unknown method `{v}` (minibatch, fastclip, neuclip, simultaneous)"),
                    )
                })?
            }
            "seed" => self.seed = parse_num(key, v)?,
            "steps" => self.steps = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "eval_every" => self.eval_every = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "flow_through_alpha" => t.flow_through_alpha = parse_bool(key, v)?,
            "data.path" => {
                if matches!(&self.data, DataSource::Synthetic(s) if *s != RunConfig::default_spec()) {
                    return Err(Error::config(key, "cannot combine with data.* generator keys"));
                }
                self.data = DataSource::File(base.join(v));
            }
            "data.n" => self.synthetic(key)?.n = parse_num(key, v)?,
            "data.k" => self.synthetic(key)?.k = parse_num(key, v)?,
            "data.d_latent" => self.synthetic(key)?.d_latent = parse_num(key, v)?,
            "data.d_raw_image" => self.synthetic(key)?.d_raw_image = parse_num(key, v)?,
            "data.d_raw_text" => self.synthetic(key)?.d_raw_text = parse_num(key, v)?,
            "data.sigma" => self.synthetic(key)?.sigma = parse_f64(key, v)?,
            "data.seed" => self.synthetic(key)?.seed = parse_num(key, v)?,
            "encoder.kind" => {
                self.encoder_kind = EncoderKind::parse(v)
                    .ok_or_else(|| Error::config(key, format!("unknown encoder `{v}` (direct, linear, mlp1)")))?
            }
            "encoder.dim" => self.encoder_dim = parse_num(key, v)?,
            "encoder.hidden" => self.encoder_hidden = parse_num(key, v)?,
            "encoder.optimizer" => {
                let k = parse_optimizer(key, v)?;
                t.encoder_opt = OptimConfig::of(k, t.encoder_opt.lr, t.encoder_opt.weight_decay);
            }
            "encoder.lr" => t.encoder_opt.lr = parse_f64(key, v)?,
            "encoder.wd" => t.encoder_opt.weight_decay = parse_f64(key, v)?,
            "tau.init" => t.gcl.tau = parse_f64(key, v)?,
            "tau.min" => t.gcl.tau_min = parse_f64(key, v)?,
            "tau.lr" => t.tau_lr = parse_f64(key, v)?,
            "loss.eps" => t.gcl.eps = parse_f64(key, v)?,
            "loss.rho" => t.gcl.rho = parse_f64(key, v)?,
            "fastclip.gamma" => {
                self.gamma_start = parse_f64(key, v)?;
                if self.gamma_kind == GammaKind::Constant {
                    self.gamma_end = self.gamma_start;
                }
            }
            "fastclip.gamma_schedule" => {
                self.gamma_kind = match v {
                    "constant" => GammaKind::Constant,
                    "cosine" => GammaKind::Cosine,
                    _ => return Err(Error::config(key, format!("unknown schedule `{v}` (constant, cosine)"))),
                }
            }
            "fastclip.gamma_end" => self.gamma_end = parse_f64(key, v)?,
            "fastclip.gamma_decay_steps" => self.gamma_steps = parse_num(key, v)?,
            "npn.arch" => {
                t.npn_arch = NpnArch::parse(v)
                    .ok_or_else(|| Error::config(key, format!("unknown architecture `{v}` (prototype, mlp)")))?
            }
            "npn.m" => t.npn_width = parse_num(key, v)?,
            "npn.t_r" => {
                t.t_r = if v == "inf" { None } else { Some(parse_num(key, v)?) };
            }
            "npn.t_u" => t.t_u = parse_num(key, v)?,
            "npn.objective" => {
                t.npn_objective = NpnObjective::parse(v)
                    .ok_or_else(|| Error::config(key, format!("unknown objective `{v}` (unified, separate)")))?
            }
            "npn.optimizer" => {
                let k = parse_optimizer(key, v)?;
                t.npn_opt = OptimConfig::of(k, t.npn_opt.lr, t.npn_opt.weight_decay);
            }
            "npn.lr" => t.npn_opt.lr = parse_f64(key, v)?,
            "npn.wd" => t.npn_opt.weight_decay = parse_f64(key, v)?,
            "npn.reset_optimizer_on_restart" => t.reset_npn_opt_on_restart = parse_bool(key, v)?,
            "output.dir" => self.output_dir = Some(base.join(v)),
            "output.record_wall_time" => self.record_wall_time = parse_bool(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        self.trainer.gamma = match self.gamma_kind {
            GammaKind::Constant => GammaSchedule::Constant(self.gamma_start),
            GammaKind::Cosine => GammaSchedule::Cosine {
                start: self.gamma_start,
                end: self.gamma_end,
                steps: self.gamma_steps,
            },
        };
        Ok(())
    }

    fn default_spec() -> SyntheticSpec {
        match RunConfig::default().data {
            DataSource::Synthetic(s) => s,
            DataSource::File(_) => unreachable!("default data is synthetic"),
        }
    }

    /// Checks every field a run depends on.
    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        let pos = |key: &str, x: f64| -> Result<()> {
            if x > 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive, got {x}")))
            }
        };
        let nonneg = |key: &str, x: f64| -> Result<()> {
            if x >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be non-negative, got {x}")))
            }
        };
        pos("tau.min", t.gcl.tau_min)?;
        if t.gcl.tau < t.gcl.tau_min {
            return Err(Error::config("tau.init", "must be at least tau.min"));
        }
        nonneg("tau.lr", t.tau_lr)?;
        nonneg("loss.eps", t.gcl.eps)?;
        nonneg("loss.rho", t.gcl.rho)?;
        nonneg("encoder.lr", t.encoder_opt.lr)?;
        nonneg("encoder.wd", t.encoder_opt.weight_decay)?;
        nonneg("npn.lr", t.npn_opt.lr)?;
        nonneg("npn.wd", t.npn_opt.weight_decay)?;
        if t.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if self.encoder_dim == 0 {
            return Err(Error::config("encoder.dim", "must be at least 1"));
        }
        if self.encoder_kind == EncoderKind::Mlp1 && self.encoder_hidden == 0 {
            return Err(Error::config("encoder.hidden", "must be at least 1 for mlp1"));
        }
        for (key, g) in [
            ("fastclip.gamma", self.gamma_start),
            ("fastclip.gamma_end", self.gamma_end),
        ] {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {g}")));
            }
        }
        if t.npn_width == 0 {
            return Err(Error::config("npn.m", "must be at least 1"));
        }
        if t.t_u == 0 {
            return Err(Error::config("npn.t_u", "must be at least 1"));
        }
        if t.t_r == Some(0) {
            return Err(Error::config("npn.t_r", "must be at least 1 or `inf`"));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate().map_err(|e| Error::config("data", e.to_string()))?;
            if t.batch_size > s.n {
                return Err(Error::config(
                    "batch_size",
                    format!("{} exceeds data.n = {}", t.batch_size, s.n),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn parses_all_documented_keys() {
        let text = "
# a comment
method = neuclip   # trailing comment
seed = 7
steps = 20
batch_size = 16
eval_every = 5
checkpoint_every = 10
flow_through_alpha = true
data.n = 64
data.k = 4
data.d_latent = 3
data.d_raw_image = 5
data.d_raw_text = 6
data.sigma = 0.2
data.seed = 9
encoder.kind = mlp1
encoder.dim = 4
encoder.hidden = 8
encoder.optimizer = adamw
encoder.lr = 0.01
encoder.wd = 0.1
tau.init = 0.1
tau.min = 0.02
tau.lr = 0.001
loss.eps = 1e-6
loss.rho = 2.5
fastclip.gamma_schedule = cosine
fastclip.gamma = 0.9
fastclip.gamma_end = 0.2
fastclip.gamma_decay_steps = 100
npn.arch = mlp
npn.m = 12
npn.t_r = inf
npn.t_u = 3
npn.objective = separate
npn.optimizer = sgd
npn.lr = 0.5
npn.wd = 0.01
npn.reset_optimizer_on_restart = false
output.dir = out
output.record_wall_time = true
";
        let c = parse(text).unwrap();
        let used: Vec<String> = parse_pairs(text).unwrap().into_iter().map(|p| p.1).collect();
        for key in KEYS {
            if *key != "data.path" {
                assert!(used.iter().any(|u| u == key), "{key}");
            }
        }
        assert_eq!(c.trainer.method, Method::NeuClip);
        assert_eq!(c.seed, 7);
        assert_eq!(c.trainer.t_r, None);
        assert_eq!(c.trainer.npn_opt.kind, OptimizerKind::Sgd);
        assert_eq!(c.trainer.npn_opt.lr, 0.5);
        assert_eq!(
            c.trainer.gamma,
            GammaSchedule::Cosine {
                start: 0.9,
                end: 0.2,
                steps: 100
            }
        );
        assert_eq!(c.output_dir, Some(PathBuf::from("/base/out")));
        assert_eq!(c.encoder_kind, EncoderKind::Mlp1);
        assert!(c.record_wall_time);
        assert!(c.trainer.flow_through_alpha);
    }

    #[test]
    fn defaults_follow_reference_values() {
        let c = parse("").unwrap();
        assert_eq!(c.trainer.t_r, Some(500));
        assert_eq!(c.trainer.t_u, 10);
        assert_eq!(c.trainer.npn_width, 256);
        assert_eq!(c.trainer.npn_opt, OptimConfig::adagrad(1.0, 0.0));
        assert_eq!(c.trainer.gamma, GammaSchedule::Constant(0.8));
        assert_eq!(c.trainer.gcl.eps, 1e-8);
        assert_eq!(c.trainer.gcl.tau, 0.07);
        assert_eq!(c.trainer.gcl.tau_min, 0.01);
        assert!(!c.trainer.flow_through_alpha);
    }

    fn field_of(r: Result<RunConfig>) -> String {
        match r {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of(parse("lr = 0.1")), "lr");
        assert_eq!(field_of(parse("method = sgd")), "method");
        assert_eq!(field_of(parse("steps = ten")), "steps");
        assert_eq!(field_of(parse("seed = 1\nseed = 2")), "seed");
        assert_eq!(field_of(parse("tau.init = 0.001")), "tau.init");
        assert_eq!(field_of(parse("fastclip.gamma = 1.5")), "fastclip.gamma");
        assert_eq!(field_of(parse("batch_size = 1")), "batch_size");
        assert_eq!(field_of(parse("npn.t_r = 0")), "npn.t_r");
        assert_eq!(field_of(parse("flow_through_alpha = yes")), "flow_through_alpha");
        assert_eq!(field_of(parse("just words")), "line 1");
        assert_eq!(
            field_of(parse("data.n = 10\ndata.k = 2\nbatch_size = 20")),
            "batch_size"
        );
        assert_eq!(field_of(parse("data.path = x.nckp\ndata.n = 10")), "data.n");
    }
}
