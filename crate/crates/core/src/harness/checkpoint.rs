//! Save and restore a full [`TrainState`] through the NCKP container.
//!
//! Loading starts from a freshly built state with the same configuration and
//! overwrites every mutable field, so shapes are checked against it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::container::Container;
use crate::npn::NpnArch;
use crate::numerics::{Rng, RngState};
use crate::optim::OptimizerState;
use crate::trainers::{Estimator, TrainState};

fn count(x: u64) -> f64 {
    x as f64
}

fn uncount(name: &str, x: f64) -> Result<u64> {
    if x >= 0.0 && x.fract() == 0.0 && x <= (1u64 << 53) as f64 {
        Ok(x as u64)
    } else {
        Err(Error::Format(format!("entry `{name}` is not a count: {x}")))
    }
}

fn push_opt(c: &mut Container, prefix: &str, o: &OptimizerState) -> Result<()> {
    c.push(format!("{prefix}.m"), &[o.m.len()], o.m.clone())?;
    c.push(format!("{prefix}.v"), &[o.v.len()], o.v.clone())?;
    c.push_scalar(format!("{prefix}.t"), count(o.t))
}

fn read_opt(c: &Container, prefix: &str, o: &mut OptimizerState) -> Result<()> {
    let (lm, lv) = (o.m.len(), o.v.len());
    o.m.copy_from_slice(c.values(&format!("{prefix}.m"), lm)?);
    o.v.copy_from_slice(c.values(&format!("{prefix}.v"), lv)?);
    let name = format!("{prefix}.t");
    o.t = uncount(&name, c.scalar(&name)?)?;
    Ok(())
}

fn read_rng(c: &Container, name: &str) -> Result<Rng> {
    Ok(Rng::from_state(&RngState::from_words(c.values(name, 14)?)?))
}

fn npn_entries(arch: NpnArch, dim: usize, width: usize, len: usize) -> [(&'static str, Vec<usize>); 2] {
    match arch {
        NpnArch::Prototype => [("npn.w1", vec![dim, width]), ("npn.w2", vec![dim, width])],
        NpnArch::Mlp => [("npn.mlp1", vec![len / 2]), ("npn.mlp2", vec![len / 2])],
    }
}

/// Serializes every parameter, optimizer moment and generator position.
pub fn state_to_container(s: &TrainState) -> Result<Container> {
    let mut c = Container::new();
    c.push_scalar("step", count(s.step))?;
    c.push_scalar("kappa", s.kappa)?;
    for (name, range, dims) in s.encoder.blocks() {
        c.push(name, &dims, s.encoder.values[range].to_vec())?;
    }
    push_opt(&mut c, "enc_opt", &s.enc_opt)?;
    push_opt(&mut c, "tau_opt", &s.tau_opt)?;
    let sm = &s.sampler;
    c.push(
        "sampler.perm",
        &[sm.perm.len()],
        sm.perm.iter().map(|&i| i as f64).collect(),
    )?;
    c.push_scalar("sampler.pos", sm.pos as f64)?;
    c.push_scalar("sampler.epoch", count(sm.epoch))?;
    c.push("sampler.rng", &[14], sm.rng.state().to_words())?;
    c.push("restart_rng", &[14], s.restart_rng.state().to_words())?;
    match &s.estimator {
        Estimator::None => {}
        Estimator::Ema(e) => {
            c.push("ema.u1", &[e.u1.len()], e.u1.clone())?;
            c.push("ema.u2", &[e.u2.len()], e.u2.clone())?;
            c.push(
                "ema.initialized",
                &[e.initialized.len()],
                e.initialized.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
        }
        Estimator::Npn { net, opt } => {
            let half = net.len() / 2;
            let [(n1, d1), (n2, d2)] = npn_entries(net.arch, net.dim, net.width, net.len());
            c.push(n1, &d1, net.values[..half].to_vec())?;
            c.push(n2, &d2, net.values[half..].to_vec())?;
            push_opt(&mut c, "npn_opt", opt)?;
        }
    }
    Ok(c)
}

/// Overwrites `template` with the contents of `c`.
pub fn state_from_container(c: &Container, mut s: TrainState) -> Result<TrainState> {
    s.step = uncount("step", c.scalar("step")?)?;
    s.kappa = c.scalar("kappa")?;
    for (name, range, _) in s.encoder.blocks() {
        let len = range.len();
        s.encoder.values[range].copy_from_slice(c.values(&name, len)?);
    }
    read_opt(c, "enc_opt", &mut s.enc_opt)?;
    read_opt(c, "tau_opt", &mut s.tau_opt)?;
    let n = s.sampler.n;
    let perm = c.values("sampler.perm", n)?;
    s.sampler.perm = perm
        .iter()
        .map(|&x| uncount("sampler.perm", x).map(|i| i as usize))
        .collect::<Result<Vec<_>>>()?;
    if s.sampler.perm.iter().any(|&i| i >= n) {
        return Err(Error::Format("sampler.perm holds an out-of-range id".into()));
    }
    s.sampler.pos = uncount("sampler.pos", c.scalar("sampler.pos")?)? as usize;
    s.sampler.epoch = uncount("sampler.epoch", c.scalar("sampler.epoch")?)?;
    s.sampler.rng = read_rng(c, "sampler.rng")?;
    s.restart_rng = read_rng(c, "restart_rng")?;
    match &mut s.estimator {
        Estimator::None => {}
        Estimator::Ema(e) => {
            let n = e.u1.len();
            e.u1.copy_from_slice(c.values("ema.u1", n)?);
            e.u2.copy_from_slice(c.values("ema.u2", n)?);
            e.initialized = c.values("ema.initialized", n)?.iter().map(|&x| x != 0.0).collect();
        }
        Estimator::Npn { net, opt } => {
            let half = net.len() / 2;
            let [(n1, _), (n2, _)] = npn_entries(net.arch, net.dim, net.width, net.len());
            net.values[..half].copy_from_slice(c.values(n1, half)?);
            net.values[half..].copy_from_slice(c.values(n2, half)?);
            read_opt(c, "npn_opt", opt)?;
        }
    }
    if !s.kappa.is_finite() || s.encoder.values.iter().any(|x| !x.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    Ok(s)
}

pub fn save_state(s: &TrainState, path: &Path) -> Result<()> {
    state_to_container(s)?.save(path)
}

pub fn load_state(path: &Path, template: TrainState) -> Result<TrainState> {
    state_from_container(&Container::load(path)?, template)
}
