//! Robust global contrastive loss, its conjugate reformulation with per-anchor
//! log-normalizers, and analytic gradients for both.
//!
//! Embeddings are assumed unit-norm so `s_ij = e1_i . e2_j`. Everything is
//! written in terms of the pair kernel [`PairTerms`], which evaluates the
//! partition terms `g1`, `g2` over a dense pool and pulls back any weighted
//! combination `sum_i c1_i g1(i) + c2_i g2(i)` to the embeddings and `tau`.

use crate::error::{Error, Result};
use crate::numerics::{dot, Mat};
use crate::par;

/// Loss hyperparameters. `tau` is the current temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GclConfig {
    pub tau: f64,
    pub tau_min: f64,
    pub eps: f64,
    pub rho: f64,
}

impl Default for GclConfig {
    fn default() -> Self {
        GclConfig {
            tau: 0.07,
            tau_min: 0.01,
            eps: 1e-8,
            rho: 1.0,
        }
    }
}

impl GclConfig {
    pub fn with_tau(self, tau: f64) -> Self {
        GclConfig { tau, ..self }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_anchor_g1: Vec<f64>,
    pub per_anchor_g2: Vec<f64>,
    pub per_anchor_log_normalizer_1: Vec<f64>,
    pub per_anchor_log_normalizer_2: Vec<f64>,
}

/// Rows per block when streaming over a large pool.
const BLOCK_ROWS: usize = 256;

/// `g` for every row of `a` against all rows of `b`:
/// `g(i) = 1/(p-1) * sum_{j != i} exp((a_i.b_j - a_i.b_i)/tau)`.
fn dense_partition(a: &Mat, b: &Mat, tau: f64) -> Result<Vec<f64>> {
    let p = a.rows();
    let bt = b.transpose();
    let scale = 1.0 / (p as f64 - 1.0);
    let mut out = Vec::with_capacity(p);
    let mut start = 0;
    while start < p {
        let end = (start + BLOCK_ROWS).min(p);
        let idx: Vec<usize> = (start..end).collect();
        let s = a.gather_rows(&idx).matmul(&bt)?;
        out.extend(par::map_indexed(end - start, |r| {
            let i = start + r;
            let row = s.row(r);
            let sii = row[i];
            let mut acc = 0.0;
            for (j, &sij) in row.iter().enumerate() {
                if j != i {
                    acc += ((sij - sii) / tau).exp();
                }
            }
            acc * scale
        }));
        start = end;
    }
    Ok(out)
}

/// `(g1, g2)` where the pool is every row of `e1`/`e2`.
pub fn dense_g_values(e1: &Mat, e2: &Mat, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_pair(e1, e2)?;
    Ok((dense_partition(e1, e2, tau)?, dense_partition(e2, e1, tau)?))
}

fn check_pair(e1: &Mat, e2: &Mat) -> Result<()> {
    if e1.shape() != e2.shape() {
        return Err(Error::DimensionMismatch(format!(
            "image embeddings {:?} vs text embeddings {:?}",
            e1.shape(),
            e2.shape()
        )));
    }
    if e1.rows() < 2 {
        return Err(Error::PoolTooSmall(e1.rows()));
    }
    Ok(())
}

/// Partition terms for `anchors`, with negatives drawn from `pool`.
pub fn g_values(
    e1: &Mat,
    e2: &Mat,
    cfg: &GclConfig,
    anchors: &[usize],
    pool: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if pool.len() < 2 {
        return Err(Error::PoolTooSmall(pool.len()));
    }
    let mut pos = vec![usize::MAX; e1.rows()];
    for (k, &i) in pool.iter().enumerate() {
        if i >= e1.rows() {
            return Err(Error::DimensionMismatch(format!("pool index {i} out of range")));
        }
        pos[i] = k;
    }
    let (g1, g2) = dense_g_values(&e1.gather_rows(pool), &e2.gather_rows(pool), cfg.tau)?;
    let mut o1 = Vec::with_capacity(anchors.len());
    let mut o2 = Vec::with_capacity(anchors.len());
    for &i in anchors {
        let k = *pos
            .get(i)
            .filter(|&&k| k != usize::MAX)
            .ok_or(Error::AnchorOutsidePool(i))?;
        o1.push(g1[k]);
        o2.push(g2[k]);
    }
    Ok((o1, o2))
}

/// Total robust GCL over the full dataset.
pub fn gcl_value(e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<LossReport> {
    let (g1, g2) = dense_g_values(e1, e2, cfg.tau)?;
    Ok(report_from_g(g1, g2, cfg))
}

/// Assembles the loss from already computed partition terms.
pub fn report_from_g(g1: Vec<f64>, g2: Vec<f64>, cfg: &GclConfig) -> LossReport {
    let n = g1.len() as f64;
    let l1: Vec<f64> = g1.iter().map(|g| (cfg.eps + g).ln()).collect();
    let l2: Vec<f64> = g2.iter().map(|g| (cfg.eps + g).ln()).collect();
    let total = cfg.tau * l1.iter().sum::<f64>() / n + cfg.tau * l2.iter().sum::<f64>() / n + 2.0 * cfg.tau * cfg.rho;
    LossReport {
        total,
        per_anchor_g1: g1,
        per_anchor_g2: g2,
        per_anchor_log_normalizer_1: l1,
        per_anchor_log_normalizer_2: l2,
    }
}

/// Cached exponentials of a dense pool.
///
/// `a[i][j] = exp((s_ij - s_ii)/tau)` feeds `g1(i)`, and
/// `b[i][j] = exp((s_ji - s_ii)/tau)` feeds `g2(i)`; diagonals are zero.
#[derive(Debug, Clone)]
pub struct PairTerms {
    pub tau: f64,
    s: Mat,
    a: Mat,
    b: Mat,
    pub g1: Vec<f64>,
    pub g2: Vec<f64>,
}

impl PairTerms {
    pub fn new(e1: &Mat, e2: &Mat, tau: f64) -> Result<Self> {
        check_pair(e1, e2)?;
        let p = e1.rows();
        let s = e1.matmul_t(e2)?;
        let st = s.transpose();
        let scale = 1.0 / (p as f64 - 1.0);
        let mut a = Mat::zeros(p, p);
        let mut b = Mat::zeros(p, p);
        par::for_each_chunk(a.as_mut_slice(), p, |i, row| {
            let si = s.row(i);
            let sii = si[i];
            for j in 0..p {
                if j != i {
                    row[j] = ((si[j] - sii) / tau).exp();
                }
            }
        });
        par::for_each_chunk(b.as_mut_slice(), p, |i, row| {
            let col = st.row(i);
            let sii = col[i];
            for j in 0..p {
                if j != i {
                    row[j] = ((col[j] - sii) / tau).exp();
                }
            }
        });
        let g1 = par::map_indexed(p, |i| a.row(i).iter().sum::<f64>() * scale);
        let g2 = par::map_indexed(p, |i| b.row(i).iter().sum::<f64>() * scale);
        Ok(PairTerms { tau, s, a, b, g1, g2 })
    }

    pub fn len(&self) -> usize {
        self.g1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g1.is_empty()
    }

    /// `dL/ds_ii` of `sum_i c1_i g1(i) + c2_i g2(i)`.
    pub fn diag_sensitivity(&self, c1: &[f64], c2: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|i| -(c1[i] * self.g1[i] + c2[i] * self.g2[i]) / self.tau)
            .collect()
    }

    /// Gradient of `sum_i c1_i g1(i) + c2_i g2(i)` with respect to the
    /// embeddings and `tau`, with `c` held fixed.
    pub fn backward(&self, e1: &Mat, e2: &Mat, c1: &[f64], c2: &[f64]) -> Result<(Mat, Mat, f64)> {
        let p = self.len();
        let tau = self.tau;
        let k = 1.0 / ((p as f64 - 1.0) * tau);
        // Row i of `ga` holds dL/ds_ij from g1(i); row i of `gb` holds dL/ds_ji from g2(i).
        let mut ga = Mat::zeros(p, p);
        let mut gb = Mat::zeros(p, p);
        par::for_each_chunk(ga.as_mut_slice(), p, |i, row| {
            let w = c1[i] * k;
            for (o, &x) in row.iter_mut().zip(self.a.row(i)) {
                *o = w * x;
            }
            row[i] = -c1[i] * self.g1[i] / tau;
        });
        par::for_each_chunk(gb.as_mut_slice(), p, |i, row| {
            let w = c2[i] * k;
            for (o, &x) in row.iter_mut().zip(self.b.row(i)) {
                *o = w * x;
            }
            row[i] = -c2[i] * self.g2[i] / tau;
        });
        let chain = par::map_indexed(p, |i| {
            let si = self.s.row(i);
            let sii = si[i];
            let mut t1 = 0.0;
            for (j, (&x, &sij)) in self.a.row(i).iter().zip(si).enumerate() {
                if j != i {
                    t1 += x * (sij - sii);
                }
            }
            let mut t2 = 0.0;
            for (j, &x) in self.b.row(i).iter().enumerate() {
                if j != i {
                    t2 += x * (self.s.get(j, i) - sii);
                }
            }
            -(c1[i] * t1 + c2[i] * t2) / ((p as f64 - 1.0) * tau * tau)
        });
        let dtau: f64 = chain.iter().sum();
        // G = ga + gb^T, dE1 = G E2, dE2 = G^T E1.
        let gbt = gb.transpose();
        let mut g = ga;
        for (x, y) in g.as_mut_slice().iter_mut().zip(gbt.as_slice()) {
            *x += y;
        }
        let de1 = g.matmul(e2)?;
        let de2 = g.transpose().matmul(e1)?;
        Ok((de1, de2, dtau))
    }
}

/// Gradient of `(w, tau)` in every estimator-based method.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    pub de1: Mat,
    pub de2: Mat,
    pub dtau: f64,
}

/// Gradient in which anchor `i` is weighted by `1/u_k(i)`:
/// `tau/p * sum_i (1/u1_i) grad g1(i) + tau/p * sum_i (1/u2_i) grad g2(i)`,
/// with the temperature gradient
/// `mean log u1 + mean log u2 + 2 rho + tau/p * sum_i (1/u_i) dg/dtau`.
pub fn normalizer_weighted_grad(
    terms: &PairTerms,
    e1: &Mat,
    e2: &Mat,
    cfg: &GclConfig,
    u1: &[f64],
    u2: &[f64],
) -> Result<ObjectiveGrad> {
    let p = terms.len() as f64;
    let c1: Vec<f64> = u1.iter().map(|u| cfg.tau / (p * u)).collect();
    let c2: Vec<f64> = u2.iter().map(|u| cfg.tau / (p * u)).collect();
    let (de1, de2, chain) = terms.backward(e1, e2, &c1, &c2)?;
    let log1: f64 = u1.iter().map(|u| u.ln()).sum::<f64>() / p;
    let log2: f64 = u2.iter().map(|u| u.ln()).sum::<f64>() / p;
    Ok(ObjectiveGrad {
        de1,
        de2,
        dtau: log1 + log2 + 2.0 * cfg.rho + chain,
    })
}

/// Exact gradient of [`gcl_value`] with respect to embeddings and `tau`.
pub fn gcl_grad_exact(e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<ObjectiveGrad> {
    let terms = PairTerms::new(e1, e2, cfg.tau)?;
    let u1: Vec<f64> = terms.g1.iter().map(|g| cfg.eps + g).collect();
    let u2: Vec<f64> = terms.g2.iter().map(|g| cfg.eps + g).collect();
    normalizer_weighted_grad(&terms, e1, e2, cfg, &u1, &u2)
}

/// `exp(-alpha) c + alpha - 1`, whose minimum over `alpha` is `log c`.
pub fn conjugate_inner(alpha: f64, c: f64) -> Result<f64> {
    if c <= 0.0 || c.is_nan() {
        return Err(Error::NonPositiveC(c));
    }
    Ok((-alpha).exp() * c + alpha - 1.0)
}

pub fn conjugate_argmin(c: f64) -> Result<f64> {
    if c <= 0.0 || c.is_nan() {
        return Err(Error::NonPositiveC(c));
    }
    Ok(c.ln())
}

/// Pulls gradients on predicted log-normalizers back to the embeddings.
/// Implemented by learned normalizer models so the (w, tau) gradient can
/// optionally flow through them.
pub trait AlphaMap {
    fn alpha_vjp(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, da1: &[f64], da2: &[f64]) -> Result<(Mat, Mat)>;
}

/// How the (w, tau) gradient treats the log-normalizers.
#[derive(Clone, Copy)]
pub enum AlphaFlow<'a> {
    /// Log-normalizers are constants.
    Detached,
    /// Log-normalizers are outputs of this model evaluated on the same
    /// embeddings; the embedding gradient includes the path through it.
    Through(&'a dyn AlphaMap),
}

impl std::fmt::Debug for AlphaFlow<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlphaFlow::Detached => write!(f, "Detached"),
            AlphaFlow::Through(_) => write!(f, "Through"),
        }
    }
}

/// Unified objective on a dense pool:
/// `tau/p sum_i [exp(-a1_i)(eps+g1_i) + a1_i] + (same for 2) + 2 tau (rho - 1)`.
pub fn unified_value_dense(g1: &[f64], g2: &[f64], a1: &[f64], a2: &[f64], cfg: &GclConfig) -> f64 {
    let p = g1.len() as f64;
    let side = |g: &[f64], a: &[f64]| -> f64 {
        g.iter()
            .zip(a)
            .map(|(g, a)| (-a).exp() * (cfg.eps + g) + a)
            .sum::<f64>()
            / p
    };
    cfg.tau * side(g1, a1) + cfg.tau * side(g2, a2) + 2.0 * cfg.tau * (cfg.rho - 1.0)
}

/// `d/d alpha_i` of the unified objective: `tau/p (1 - exp(-alpha_i)(eps+g_i))`.
pub fn unified_alpha_grad(g: &[f64], a: &[f64], cfg: &GclConfig) -> Vec<f64> {
    let p = g.len() as f64;
    g.iter()
        .zip(a)
        .map(|(g, a)| cfg.tau / p * (1.0 - (-a).exp() * (cfg.eps + g)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct UnifiedGrad {
    pub de1: Mat,
    pub de2: Mat,
    pub dtau: f64,
    pub da1: Vec<f64>,
    pub da2: Vec<f64>,
}

/// Unified-objective gradient on a dense pool. The temperature gradient
/// holds the log-normalizers fixed.
pub fn unified_grad_dense(
    terms: &PairTerms,
    e1: &Mat,
    e2: &Mat,
    a1: &[f64],
    a2: &[f64],
    cfg: &GclConfig,
    flow: AlphaFlow<'_>,
) -> Result<UnifiedGrad> {
    let p = terms.len();
    if a1.len() != p || a2.len() != p {
        return Err(Error::LengthMismatch {
            left: a1.len().min(a2.len()),
            right: p,
        });
    }
    let pf = p as f64;
    let c1: Vec<f64> = a1.iter().map(|a| cfg.tau / pf * (-a).exp()).collect();
    let c2: Vec<f64> = a2.iter().map(|a| cfg.tau / pf * (-a).exp()).collect();
    let (mut de1, mut de2, chain) = terms.backward(e1, e2, &c1, &c2)?;
    let side = |g: &[f64], a: &[f64]| -> f64 {
        g.iter()
            .zip(a)
            .map(|(g, a)| (-a).exp() * (cfg.eps + g) + a)
            .sum::<f64>()
            / pf
    };
    let dtau = side(&terms.g1, a1) + side(&terms.g2, a2) + 2.0 * (cfg.rho - 1.0) + chain;
    let da1 = unified_alpha_grad(&terms.g1, a1, cfg);
    let da2 = unified_alpha_grad(&terms.g2, a2, cfg);
    if let AlphaFlow::Through(model) = flow {
        let (x1, x2) = model.alpha_vjp(e1, e2, cfg, &da1, &da2)?;
        for (d, x) in de1.as_mut_slice().iter_mut().zip(x1.as_slice()) {
            *d += x;
        }
        for (d, x) in de2.as_mut_slice().iter_mut().zip(x2.as_slice()) {
            *d += x;
        }
    }
    Ok(UnifiedGrad {
        de1,
        de2,
        dtau,
        da1,
        da2,
    })
}

/// Unified objective with anchors and negatives both equal to `pool`;
/// `a1`, `a2` are indexed by sample id.
pub fn unified_value(e1: &Mat, e2: &Mat, a1: &[f64], a2: &[f64], cfg: &GclConfig, pool: &[usize]) -> Result<f64> {
    let (g1, g2) = g_values(e1, e2, cfg, pool, pool)?;
    let pa1: Vec<f64> = pool.iter().map(|&i| a1[i]).collect();
    let pa2: Vec<f64> = pool.iter().map(|&i| a2[i]).collect();
    if pa1.iter().chain(&pa2).any(|a| !a.is_finite()) {
        return Err(Error::NonPositiveInput("log-normalizers must be finite".into()));
    }
    Ok(unified_value_dense(&g1, &g2, &pa1, &pa2, cfg))
}

/// Pool-indexed form of [`unified_grad_dense`]. Gradients are sized like the
/// inputs and zero outside the pool. A model passed through `flow` receives
/// the pooled rows.
pub fn unified_grad(
    e1: &Mat,
    e2: &Mat,
    a1: &[f64],
    a2: &[f64],
    cfg: &GclConfig,
    pool: &[usize],
    flow: AlphaFlow<'_>,
) -> Result<UnifiedGrad> {
    let p1 = e1.gather_rows(pool);
    let p2 = e2.gather_rows(pool);
    let terms = PairTerms::new(&p1, &p2, cfg.tau)?;
    let pa1: Vec<f64> = pool.iter().map(|&i| a1[i]).collect();
    let pa2: Vec<f64> = pool.iter().map(|&i| a2[i]).collect();
    let dense = unified_grad_dense(&terms, &p1, &p2, &pa1, &pa2, cfg, flow)?;
    let (n, d) = e1.shape();
    let mut out = UnifiedGrad {
        de1: Mat::zeros(n, d),
        de2: Mat::zeros(n, d),
        dtau: dense.dtau,
        da1: vec![0.0; a1.len()],
        da2: vec![0.0; a2.len()],
    };
    for (k, &i) in pool.iter().enumerate() {
        out.de1.row_mut(i).copy_from_slice(dense.de1.row(k));
        out.de2.row_mut(i).copy_from_slice(dense.de2.row(k));
        out.da1[i] = dense.da1[k];
        out.da2[i] = dense.da2[k];
    }
    Ok(out)
}

/// Mean diagonal similarity, a quick alignment diagnostic.
pub fn mean_positive_similarity(e1: &Mat, e2: &Mat) -> f64 {
    let n = e1.rows();
    (0..n).map(|i| dot(e1.row(i), e2.row(i))).sum::<f64>() / n as f64
}
