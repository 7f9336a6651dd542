//! Central finite-difference checks for every analytic gradient, shared by
//! the `gradcheck` command and the acceptance suite.

use crate::encoders::{encode, encode_backward, EncoderKind, EncoderParams, EncoderShape, RawViews};
use crate::error::Result;
use crate::npn::{NpnArch, NpnObjective, NpnParams};
use crate::numerics::{finite_diff_grad, max_rel_err, Mat, Rng, FD_STEP};
use crate::objective::{
    dense_g_values, gcl_grad_exact, gcl_value, unified_grad_dense, unified_value_dense, AlphaFlow, GclConfig, PairTerms,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradModule {
    All,
    Objective,
    Npn,
    Encoders,
}

impl GradModule {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all" => Some(GradModule::All),
            "objective" => Some(GradModule::Objective),
            "npn" => Some(GradModule::Npn),
            "encoders" => Some(GradModule::Encoders),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

fn unit_rows(n: usize, d: usize, rng: &mut Rng) -> Mat {
    let mut m = Mat::zeros(n, d);
    for i in 0..n {
        let r: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let nr = crate::numerics::norm(&r);
        for (o, v) in m.row_mut(i).iter_mut().zip(&r) {
            *o = v / nr;
        }
    }
    m
}

fn random_cfg(rng: &mut Rng) -> GclConfig {
    GclConfig {
        tau: rng.uniform_range(0.2, 1.0),
        tau_min: 0.01,
        eps: 1e-8,
        rho: rng.uniform_range(0.0, 2.0),
    }
}

fn split(v: &[f64], n: usize, d: usize) -> (Mat, Mat) {
    let nd = n * d;
    (
        Mat::from_vec(n, d, v[..nd].to_vec()).expect("sized slice"),
        Mat::from_vec(n, d, v[nd..2 * nd].to_vec()).expect("sized slice"),
    )
}

fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Exact GCL gradient in embeddings and temperature.
pub fn check_gcl(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (n, d) = (6, 4);
    let e1 = unit_rows(n, d, &mut rng);
    let e2 = unit_rows(n, d, &mut rng);
    let cfg = random_cfg(&mut rng);
    let g = gcl_grad_exact(&e1, &e2, &cfg)?;
    let theta = concat(&[e1.as_slice(), e2.as_slice(), &[cfg.tau]]);
    let fd = finite_diff_grad(
        |t| {
            let (a, b) = split(t, n, d);
            gcl_value(&a, &b, &cfg.with_tau(t[2 * n * d])).map_or(f64::NAN, |r| r.total)
        },
        &theta,
        FD_STEP,
    )?;
    let an = concat(&[g.de1.as_slice(), g.de2.as_slice(), &[g.dtau]]);
    Ok(max_rel_err(&an, &fd))
}

/// Unified gradient with fixed log-normalizers, in embeddings, alphas and temperature.
pub fn check_unified_detached(seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (n, d) = (6, 4);
    let e1 = unit_rows(n, d, &mut rng);
    let e2 = unit_rows(n, d, &mut rng);
    let cfg = random_cfg(&mut rng);
    let a1: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let a2: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    let terms = PairTerms::new(&e1, &e2, cfg.tau)?;
    let g = unified_grad_dense(&terms, &e1, &e2, &a1, &a2, &cfg, AlphaFlow::Detached)?;
    let theta = concat(&[e1.as_slice(), e2.as_slice(), &a1, &a2, &[cfg.tau]]);
    let nd = n * d;
    let fd = finite_diff_grad(
        |t| {
            let (x1, x2) = split(t, n, d);
            let c = cfg.with_tau(t[2 * nd + 2 * n]);
            match dense_g_values(&x1, &x2, c.tau) {
                Ok((g1, g2)) => {
                    unified_value_dense(&g1, &g2, &t[2 * nd..2 * nd + n], &t[2 * nd + n..2 * nd + 2 * n], &c)
                }
                Err(_) => f64::NAN,
            }
        },
        &theta,
        FD_STEP,
    )?;
    let an = concat(&[g.de1.as_slice(), g.de2.as_slice(), &g.da1, &g.da2, &[g.dtau]]);
    Ok(max_rel_err(&an, &fd))
}

/// Unified gradient when the log-normalizers are a network's outputs on the
/// same embeddings.
pub fn check_unified_through(arch: NpnArch, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (n, d) = (6, 4);
    let e1 = unit_rows(n, d, &mut rng);
    let e2 = unit_rows(n, d, &mut rng);
    let cfg = random_cfg(&mut rng);
    let net = NpnParams::init(arch, d, 5, &mut rng);
    let terms = PairTerms::new(&e1, &e2, cfg.tau)?;
    let (a1, a2) = net.forward(&e1, &e2, &cfg)?;
    let g = unified_grad_dense(&terms, &e1, &e2, &a1, &a2, &cfg, AlphaFlow::Through(&net))?;
    let theta = concat(&[e1.as_slice(), e2.as_slice()]);
    let fd = finite_diff_grad(
        |t| {
            let (x1, x2) = split(t, n, d);
            let (Ok((g1, g2)), Ok((b1, b2))) = (dense_g_values(&x1, &x2, cfg.tau), net.forward(&x1, &x2, &cfg)) else {
                return f64::NAN;
            };
            unified_value_dense(&g1, &g2, &b1, &b2, &cfg)
        },
        &theta,
        FD_STEP,
    )?;
    let an = concat(&[g.de1.as_slice(), g.de2.as_slice()]);
    Ok(max_rel_err(&an, &fd))
}

/// Network parameter gradient under either training objective.
pub fn check_npn(arch: NpnArch, objective: NpnObjective, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let (n, d) = (8, 4);
    let e1 = unit_rows(n, d, &mut rng);
    let e2 = unit_rows(n, d, &mut rng);
    let cfg = random_cfg(&mut rng);
    let net = NpnParams::init(arch, d, 4, &mut rng);
    let (g1, g2) = dense_g_values(&e1, &e2, cfg.tau)?;
    let t1: Vec<f64> = g1.iter().map(|g| (cfg.eps + g).ln()).collect();
    let t2: Vec<f64> = g2.iter().map(|g| (cfg.eps + g).ln()).collect();
    let an = net.grad(&e1, &e2, &cfg, objective, Some((&t1, &t2)))?;
    let fd = finite_diff_grad(
        |v| {
            let mut p = net.clone();
            p.values.copy_from_slice(v);
            let Ok((a1, a2)) = p.forward(&e1, &e2, &cfg) else {
                return f64::NAN;
            };
            match objective {
                NpnObjective::Unified => unified_value_dense(&g1, &g2, &a1, &a2, &cfg),
                NpnObjective::Separate => {
                    let sq = |a: &[f64], t: &[f64]| -> f64 {
                        a.iter().zip(t).map(|(a, t)| (a - t).powi(2)).sum::<f64>() / (2.0 * n as f64)
                    };
                    sq(&a1, &t1) + sq(&a2, &t2)
                }
            }
        },
        &net.values,
        FD_STEP,
    )?;
    Ok(max_rel_err(&an, &fd))
}

/// Encoder backward pass, driven by the exact GCL gradient of the batch.
pub fn check_encoder(kind: EncoderKind, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed);
    let n = 7;
    let shape = EncoderShape {
        kind,
        n,
        raw_image: 5,
        raw_text: 4,
        hidden: 6,
        dim: 3,
    };
    // Unit-scale weights keep pre-normalization norms away from zero, where
    // curvature makes the h = 1e-5 central difference itself inaccurate.
    let mut params = EncoderParams::zeros(shape);
    params.values.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
    let ri = Mat::uniform(n, 5, -1.0, 1.0, &mut rng);
    let rt = Mat::uniform(n, 4, -1.0, 1.0, &mut rng);
    let raw = RawViews { image: &ri, text: &rt };
    let idx = [5, 0, 3, 6, 2];
    let cfg = random_cfg(&mut rng);
    let batch = encode(&params, raw, &idx)?;
    let g = gcl_grad_exact(&batch.e1, &batch.e2, &cfg)?;
    let an = encode_backward(&params, &batch, &g.de1, &g.de2)?;
    let fd = finite_diff_grad(
        |v| {
            let mut q = params.clone();
            q.values.copy_from_slice(v);
            encode(&q, raw, &idx)
                .and_then(|b| gcl_value(&b.e1, &b.e2, &cfg))
                .map_or(f64::NAN, |r| r.total)
        },
        &params.values,
        FD_STEP,
    )?;
    Ok(max_rel_err(&an, &fd))
}

/// Runs the selected checks on seeds `0..seeds`.
pub fn run_gradcheck(module: GradModule, seeds: u64) -> Result<Vec<CheckResult>> {
    let want = |m: GradModule| module == GradModule::All || module == m;
    let mut out = Vec::new();
    let mut push = |name: &str, seed: u64, err: f64| {
        out.push(CheckResult {
            name: name.to_string(),
            seed,
            max_rel_err: err,
        })
    };
    for seed in 0..seeds {
        if want(GradModule::Objective) {
            push("objective.gcl_grad_exact", seed, check_gcl(seed)?);
            push("objective.unified_grad.detached", seed, check_unified_detached(seed)?);
            push(
                "objective.unified_grad.through_prototype",
                seed,
                check_unified_through(NpnArch::Prototype, seed)?,
            );
            push(
                "objective.unified_grad.through_mlp",
                seed,
                check_unified_through(NpnArch::Mlp, seed)?,
            );
        }
        if want(GradModule::Npn) {
            for arch in [NpnArch::Prototype, NpnArch::Mlp] {
                for obj in [NpnObjective::Unified, NpnObjective::Separate] {
                    let name = format!("npn.{}.{}", arch.name(), obj.name());
                    push(&name, seed, check_npn(arch, obj, seed)?);
                }
            }
        }
        if want(GradModule::Encoders) {
            for kind in [EncoderKind::Direct, EncoderKind::Linear, EncoderKind::Mlp1] {
                push(&format!("encoders.{}", kind.name()), seed, check_encoder(kind, seed)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        let res = run_gradcheck(GradModule::All, 3).unwrap();
        assert_eq!(res.len(), 3 * (4 + 4 + 3));
        for r in &res {
            assert!(r.passed(), "{} seed {}: {}", r.name, r.seed, r.max_rel_err);
        }
    }

    #[test]
    fn module_filter() {
        let res = run_gradcheck(GradModule::Encoders, 1).unwrap();
        assert!(res.iter().all(|r| r.name.starts_with("encoders.")));
        assert_eq!(res.len(), 3);
        assert_eq!(GradModule::parse("npn"), Some(GradModule::Npn));
        assert_eq!(GradModule::parse("x"), None);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let mut rng = Rng::new(1);
        let e1 = unit_rows(5, 3, &mut rng);
        let e2 = unit_rows(5, 3, &mut rng);
        let cfg = random_cfg(&mut rng);
        let g = gcl_grad_exact(&e1, &e2, &cfg).unwrap();
        let fd = finite_diff_grad(
            |t| gcl_value(&e1, &e2, &cfg.with_tau(t[0])).unwrap().total,
            &[cfg.tau],
            FD_STEP,
        )
        .unwrap();
        assert!(max_rel_err(&[g.dtau * 1.001], &fd) > TOLERANCE);
    }
}
