//! Normalizer-prediction networks.
//!
//! The prototype network predicts the image-anchor log-normalizer as
//! `log(eps + 1/m sum_j exp((cos(e1_i, W1_j) - e1_i.e2_i)/tau))` and the
//! text-anchor one symmetrically with `W2`. `eps` enters the pooling as one
//! extra logit `log(eps m)`, so the expression is evaluated with a single
//! max-shifted log-sum-exp.
//!
//! An MLP variant (two tanh layers on the concatenated pair) is kept for
//! ablations behind the same interface. It has no prototypes, so restart
//! leaves it unchanged.

use crate::error::{Error, Result};
use crate::estimators::estimation_error;
use crate::numerics::{Mat, Rng, NORM_FLOOR};
use crate::objective::{dense_g_values, unified_alpha_grad, AlphaMap, GclConfig};
use crate::optim::OptimizerState;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpnArch {
    Prototype,
    Mlp,
}

impl NpnArch {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "prototype" => Some(NpnArch::Prototype),
            "mlp" => Some(NpnArch::Mlp),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NpnArch::Prototype => "prototype",
            NpnArch::Mlp => "mlp",
        }
    }
}

/// Training objective for the network parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NpnObjective {
    /// The unified objective, with the batch as the negative pool.
    Unified,
    /// `1/(2B) sum_i (alpha_i - target_i)^2` per side.
    Separate,
}

impl NpnObjective {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unified" => Some(NpnObjective::Unified),
            "separate" => Some(NpnObjective::Separate),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NpnObjective::Unified => "unified",
            NpnObjective::Separate => "separate",
        }
    }
}

/// Parameters of both networks, stored flat.
///
/// Prototype: `[W1 (d x m, row-major), W2 (d x m)]`.
/// MLP: per side `[Wa (2d x h), ba (h), Wb (h x h), bb (h), wc (h), bc]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NpnParams {
    pub arch: NpnArch,
    pub dim: usize,
    /// Prototype count `m`, or the hidden width of the MLP.
    pub width: usize,
    pub values: Vec<f64>,
}

/// Cached quantities of one prototype side.
struct ProtoSide {
    alpha: Vec<f64>,
    /// Cosines, `B x m`.
    cos: Mat,
    /// Pooling weights of the prototype logits, `B x m`.
    p: Mat,
    p_pseudo: Vec<f64>,
    anchor_norm: Vec<f64>,
    col_norm: Vec<f64>,
}

/// Cached activations of one MLP side.
struct MlpSide {
    alpha: Vec<f64>,
    x: Mat,
    h1: Mat,
    h2: Mat,
}

struct MlpView<'a> {
    wa: &'a [f64],
    ba: &'a [f64],
    wb: &'a [f64],
    bb: &'a [f64],
    wc: &'a [f64],
    bc: f64,
}

fn mlp_side_len(d: usize, h: usize) -> usize {
    2 * d * h + h + h * h + h + h + 1
}

impl NpnParams {
    /// Prototype networks from explicit `d x m` matrices.
    pub fn prototype(w1: &Mat, w2: &Mat) -> Result<Self> {
        if w1.shape() != w2.shape() {
            return Err(Error::DimensionMismatch(format!(
                "W1 is {:?}, W2 is {:?}",
                w1.shape(),
                w2.shape()
            )));
        }
        let (d, m) = w1.shape();
        let mut values = w1.as_slice().to_vec();
        values.extend_from_slice(w2.as_slice());
        Ok(NpnParams {
            arch: NpnArch::Prototype,
            dim: d,
            width: m,
            values,
        })
    }

    /// Prototype networks with standard normal entries.
    pub fn init_prototype(d: usize, m: usize, rng: &mut Rng) -> Self {
        let values = (0..2 * d * m).map(|_| rng.normal()).collect();
        NpnParams {
            arch: NpnArch::Prototype,
            dim: d,
            width: m,
            values,
        }
    }

    /// MLP networks with uniform fan-in scaled weights and zero biases.
    pub fn init_mlp(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut values = Vec::with_capacity(2 * mlp_side_len(d, hidden));
        for _ in 0..2 {
            let sa = 1.0 / ((2 * d) as f64).sqrt();
            let sb = 1.0 / (hidden as f64).sqrt();
            values.extend((0..2 * d * hidden).map(|_| rng.uniform_range(-sa, sa)));
            values.extend(std::iter::repeat_n(0.0, hidden));
            values.extend((0..hidden * hidden).map(|_| rng.uniform_range(-sb, sb)));
            values.extend(std::iter::repeat_n(0.0, hidden));
            values.extend((0..hidden).map(|_| rng.uniform_range(-sb, sb)));
            values.push(0.0);
        }
        NpnParams {
            arch: NpnArch::Mlp,
            dim: d,
            width: hidden,
            values,
        }
    }

    pub fn init(arch: NpnArch, d: usize, width: usize, rng: &mut Rng) -> Self {
        match arch {
            NpnArch::Prototype => Self::init_prototype(d, width, rng),
            NpnArch::Mlp => Self::init_mlp(d, width, rng),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn side_len(&self) -> usize {
        self.values.len() / 2
    }

    fn side(&self, k: usize) -> &[f64] {
        let l = self.side_len();
        &self.values[k * l..(k + 1) * l]
    }

    /// Block names for diagnostics, in storage order.
    pub fn block_names(&self) -> [&'static str; 2] {
        match self.arch {
            NpnArch::Prototype => ["npn.w1", "npn.w2"],
            NpnArch::Mlp => ["npn.mlp1", "npn.mlp2"],
        }
    }

    /// Name of the block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> &'static str {
        self.block_names()[(i >= self.side_len()) as usize]
    }

    /// `W1` as a `d x m` matrix (prototype only).
    pub fn w1(&self) -> Mat {
        Mat::from_vec(self.dim, self.width, self.side(0).to_vec()).expect("prototype layout")
    }

    pub fn w2(&self) -> Mat {
        Mat::from_vec(self.dim, self.width, self.side(1).to_vec()).expect("prototype layout")
    }

    fn check_inputs(&self, e1: &Mat, e2: &Mat) -> Result<()> {
        if e1.shape() != e2.shape() {
            return Err(Error::DimensionMismatch(format!(
                "E1 is {:?}, E2 is {:?}",
                e1.shape(),
                e2.shape()
            )));
        }
        if e1.cols() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "embedding dim {} but network dim {}",
                e1.cols(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Predicted log-normalizers for each anchor of the batch.
    pub fn forward(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(e1, e2)?;
        match self.arch {
            NpnArch::Prototype => {
                let s1 = self.proto_side(0, e1, e2, cfg)?;
                let s2 = self.proto_side(1, e2, e1, cfg)?;
                Ok((s1.alpha, s2.alpha))
            }
            NpnArch::Mlp => {
                let x = concat(e1, e2);
                Ok((self.mlp_side(0, &x).alpha, self.mlp_side(1, &x).alpha))
            }
        }
    }

    /// Forward over all rows in chunks, for evaluation on a full dataset.
    pub fn forward_all(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, chunk: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = e1.rows();
        let mut a1 = Vec::with_capacity(n);
        let mut a2 = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (x1, x2) = self.forward(&e1.gather_rows(&idx), &e2.gather_rows(&idx), cfg)?;
            a1.extend(x1);
            a2.extend(x2);
            start = end;
        }
        Ok((a1, a2))
    }

    /// `anchor` rows are scored against side `k` prototypes; `partner`
    /// supplies the positive similarity.
    fn proto_side(&self, k: usize, anchor: &Mat, partner: &Mat, cfg: &GclConfig) -> Result<ProtoSide> {
        let (d, m) = (self.dim, self.width);
        let w = Mat::from_vec(d, m, self.side(k).to_vec())?;
        let mut col_norm = vec![0.0; m];
        for r in 0..d {
            for (c, &x) in col_norm.iter_mut().zip(w.row(r)) {
                *c += x * x;
            }
        }
        for (j, c) in col_norm.iter_mut().enumerate() {
            *c = c.sqrt();
            if *c < NORM_FLOOR {
                return Err(Error::ZeroNormColumn(j));
            }
        }
        let b = anchor.rows();
        let mut anchor_norm = Vec::with_capacity(b);
        for i in 0..b {
            let nr = crate::numerics::norm(anchor.row(i));
            if nr < NORM_FLOOR {
                return Err(Error::ZeroNorm);
            }
            anchor_norm.push(nr);
        }
        let mut cos = anchor.matmul(&w)?;
        let mut p = Mat::zeros(b, m);
        let mut alpha = Vec::with_capacity(b);
        let mut p_pseudo = Vec::with_capacity(b);
        let pseudo = if cfg.eps > 0.0 {
            (cfg.eps * m as f64).ln()
        } else {
            f64::NEG_INFINITY
        };
        let log_m = (m as f64).ln();
        for i in 0..b {
            let sii = crate::numerics::dot(anchor.row(i), partner.row(i));
            let crow = cos.row_mut(i);
            for (c, &cn) in crow.iter_mut().zip(&col_norm) {
                *c /= anchor_norm[i] * cn;
            }
            let prow = p.row_mut(i);
            let mut mx = pseudo;
            for (z, &c) in prow.iter_mut().zip(crow.iter()) {
                *z = (c - sii) / cfg.tau;
                mx = mx.max(*z);
            }
            let mut total = 0.0;
            for z in prow.iter_mut() {
                *z = (*z - mx).exp();
                total += *z;
            }
            let ep = (pseudo - mx).exp();
            total += ep;
            for z in prow.iter_mut() {
                *z /= total;
            }
            p_pseudo.push(ep / total);
            alpha.push(mx + total.ln() - log_m);
        }
        Ok(ProtoSide {
            alpha,
            cos,
            p,
            p_pseudo,
            anchor_norm,
            col_norm,
        })
    }

    fn mlp_view(&self, k: usize) -> MlpView<'_> {
        let (d, h) = (self.dim, self.width);
        let s = self.side(k);
        let (wa, s) = s.split_at(2 * d * h);
        let (ba, s) = s.split_at(h);
        let (wb, s) = s.split_at(h * h);
        let (bb, s) = s.split_at(h);
        let (wc, s) = s.split_at(h);
        MlpView {
            wa,
            ba,
            wb,
            bb,
            wc,
            bc: s[0],
        }
    }

    fn mlp_side(&self, k: usize, x: &Mat) -> MlpSide {
        let h = self.width;
        let v = self.mlp_view(k);
        let wa = Mat::from_vec(2 * self.dim, h, v.wa.to_vec()).expect("mlp layout");
        let wb = Mat::from_vec(h, h, v.wb.to_vec()).expect("mlp layout");
        let mut h1 = x.matmul(&wa).expect("mlp shapes");
        for i in 0..h1.rows() {
            for (z, b) in h1.row_mut(i).iter_mut().zip(v.ba) {
                *z = (*z + b).tanh();
            }
        }
        let mut h2 = h1.matmul(&wb).expect("mlp shapes");
        for i in 0..h2.rows() {
            for (z, b) in h2.row_mut(i).iter_mut().zip(v.bb) {
                *z = (*z + b).tanh();
            }
        }
        let alpha = (0..h2.rows())
            .map(|i| crate::numerics::dot(h2.row(i), v.wc) + v.bc)
            .collect();
        MlpSide {
            alpha,
            x: x.clone(),
            h1,
            h2,
        }
    }

    /// Parameter gradient of `sum_i da1_i alpha1_i + da2_i alpha2_i`.
    pub fn param_vjp(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, da1: &[f64], da2: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(e1, e2)?;
        let b = e1.rows();
        if da1.len() != b || da2.len() != b {
            return Err(Error::LengthMismatch {
                left: da1.len().min(da2.len()),
                right: b,
            });
        }
        let mut out = Vec::with_capacity(self.len());
        match self.arch {
            NpnArch::Prototype => {
                let s1 = self.proto_side(0, e1, e2, cfg)?;
                out.extend(self.proto_param_grad(0, e1, &s1, da1, cfg.tau));
                let s2 = self.proto_side(1, e2, e1, cfg)?;
                out.extend(self.proto_param_grad(1, e2, &s2, da2, cfg.tau));
            }
            NpnArch::Mlp => {
                let x = concat(e1, e2);
                for (k, da) in [da1, da2].into_iter().enumerate() {
                    let side = self.mlp_side(k, &x);
                    let (g, _) = self.mlp_backward(k, &side, da);
                    out.extend(g);
                }
            }
        }
        Ok(out)
    }

    fn proto_coef(side: &ProtoSide, da: &[f64], tau: f64) -> Mat {
        let mut c = side.p.clone();
        for (i, &d) in da.iter().enumerate() {
            for x in c.row_mut(i) {
                *x *= d / tau;
            }
        }
        c
    }

    fn proto_param_grad(&self, k: usize, anchor: &Mat, side: &ProtoSide, da: &[f64], tau: f64) -> Vec<f64> {
        let (d, m) = (self.dim, self.width);
        let coef = Self::proto_coef(side, da, tau);
        let mut unit = anchor.clone();
        for i in 0..unit.rows() {
            let nr = side.anchor_norm[i];
            unit.row_mut(i).iter_mut().for_each(|x| *x /= nr);
        }
        // d x m: sum_i coef_ij a_hat_i.
        let mut g = unit.transpose().matmul(&coef).expect("shapes");
        let mut r = vec![0.0; m];
        for i in 0..coef.rows() {
            for ((rj, &c), &cs) in r.iter_mut().zip(coef.row(i)).zip(side.cos.row(i)) {
                *rj += c * cs;
            }
        }
        let w = self.side(k);
        for row in 0..d {
            let grow = g.row_mut(row);
            for j in 0..m {
                let cn = side.col_norm[j];
                grow[j] = (grow[j] - r[j] * w[row * m + j] / cn) / cn;
            }
        }
        g.into_vec()
    }

    /// Anchor-side and partner-side input gradients for one prototype side.
    fn proto_input_grad(
        &self,
        k: usize,
        anchor: &Mat,
        partner: &Mat,
        side: &ProtoSide,
        da: &[f64],
        tau: f64,
    ) -> (Mat, Mat) {
        let (d, m) = (self.dim, self.width);
        let coef = Self::proto_coef(side, da, tau);
        let w = self.side(k);
        // m x d matrix of unit prototypes.
        let mut wt = Mat::zeros(m, d);
        for row in 0..d {
            for j in 0..m {
                wt.set(j, row, w[row * m + j] / side.col_norm[j]);
            }
        }
        let mut ga = coef.matmul(&wt).expect("shapes");
        let mut gp = Mat::zeros(partner.rows(), d);
        for i in 0..anchor.rows() {
            let an = side.anchor_norm[i];
            let rc: f64 = coef.row(i).iter().zip(side.cos.row(i)).map(|(c, s)| c * s).sum();
            let diag = -da[i] * (1.0 - side.p_pseudo[i]) / tau;
            let a = anchor.row(i);
            let pr = partner.row(i);
            let garow = ga.row_mut(i);
            for t in 0..d {
                garow[t] = (garow[t] - rc * a[t] / an) / an + diag * pr[t];
            }
            for (o, &x) in gp.row_mut(i).iter_mut().zip(a) {
                *o = diag * x;
            }
        }
        (ga, gp)
    }

    /// Returns the parameter gradient and the input gradient of one MLP side.
    fn mlp_backward(&self, k: usize, side: &MlpSide, da: &[f64]) -> (Vec<f64>, Mat) {
        let (d, h) = (self.dim, self.width);
        let v = self.mlp_view(k);
        let b = da.len();
        let mut dpre2 = Mat::zeros(b, h);
        let mut dwc = vec![0.0; h];
        let mut dbc = 0.0;
        for i in 0..b {
            dbc += da[i];
            let h2 = side.h2.row(i);
            for j in 0..h {
                dwc[j] += da[i] * h2[j];
                dpre2.set(i, j, da[i] * v.wc[j] * (1.0 - h2[j] * h2[j]));
            }
        }
        let dwb = side.h1.transpose().matmul(&dpre2).expect("shapes");
        let dbb = col_sums(&dpre2);
        let wb = Mat::from_vec(h, h, v.wb.to_vec()).expect("mlp layout");
        let mut dpre1 = dpre2.matmul_t(&wb).expect("shapes");
        for i in 0..b {
            let h1 = side.h1.row(i);
            for (z, &a) in dpre1.row_mut(i).iter_mut().zip(h1) {
                *z *= 1.0 - a * a;
            }
        }
        let dwa = side.x.transpose().matmul(&dpre1).expect("shapes");
        let dba = col_sums(&dpre1);
        let wa = Mat::from_vec(2 * d, h, v.wa.to_vec()).expect("mlp layout");
        let dx = dpre1.matmul_t(&wa).expect("shapes");
        let mut g = dwa.into_vec();
        g.extend(dba);
        g.extend(dwb.into_vec());
        g.extend(dbb);
        g.extend(dwc);
        g.push(dbc);
        (g, dx)
    }

    /// Gradient of the chosen objective with respect to the parameters, with
    /// embeddings held fixed. `targets` are per-side log-normalizer targets,
    /// required by the separate objective.
    pub fn grad(
        &self,
        e1: &Mat,
        e2: &Mat,
        cfg: &GclConfig,
        objective: NpnObjective,
        targets: Option<(&[f64], &[f64])>,
    ) -> Result<Vec<f64>> {
        match objective {
            NpnObjective::Unified => {
                let (g1, g2) = dense_g_values(e1, e2, cfg.tau)?;
                self.unified_grad_given(e1, e2, cfg, &g1, &g2)
            }
            NpnObjective::Separate => {
                let (t1, t2) = targets.ok_or(Error::MissingTargets)?;
                self.separate_grad(e1, e2, cfg, t1, t2)
            }
        }
    }

    /// Unified-objective gradient with precomputed batch partition terms.
    pub fn unified_grad_given(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, g1: &[f64], g2: &[f64]) -> Result<Vec<f64>> {
        let (a1, a2) = self.forward(e1, e2, cfg)?;
        let da1 = unified_alpha_grad(g1, &a1, cfg);
        let da2 = unified_alpha_grad(g2, &a2, cfg);
        self.param_vjp(e1, e2, cfg, &da1, &da2)
    }

    fn separate_grad(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, t1: &[f64], t2: &[f64]) -> Result<Vec<f64>> {
        let (a1, a2) = self.forward(e1, e2, cfg)?;
        if t1.len() != a1.len() || t2.len() != a2.len() {
            return Err(Error::LengthMismatch {
                left: t1.len().min(t2.len()),
                right: a1.len(),
            });
        }
        let b = a1.len() as f64;
        let da1: Vec<f64> = a1.iter().zip(t1).map(|(a, t)| (a - t) / b).collect();
        let da2: Vec<f64> = a2.iter().zip(t2).map(|(a, t)| (a - t) / b).collect();
        self.param_vjp(e1, e2, cfg, &da1, &da2)
    }

    /// Re-initializes the prototypes from the batch: `W1` columns from text
    /// embeddings and `W2` columns from image embeddings of the same sampled
    /// rows. Rows are drawn without replacement when `m <= B`, with
    /// replacement otherwise. MLP networks are left unchanged.
    pub fn restart(&mut self, e1: &Mat, e2: &Mat, rng: &mut Rng) -> Result<()> {
        let b = e1.rows();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        self.check_inputs(e1, e2)?;
        if self.arch == NpnArch::Mlp {
            return Ok(());
        }
        let m = self.width;
        let rows: Vec<usize> = if m <= b {
            let mut perm = rng.permutation(b);
            perm.truncate(m);
            perm
        } else {
            (0..m).map(|_| rng.index(b)).collect()
        };
        let d = self.dim;
        let l = self.side_len();
        for (j, &r) in rows.iter().enumerate() {
            for t in 0..d {
                self.values[t * m + j] = e2.get(r, t);
                self.values[l + t * m + j] = e1.get(r, t);
            }
        }
        Ok(())
    }

    /// Rescales any prototype column whose norm fell below the floor.
    pub fn enforce_norm_floor(&mut self) {
        if self.arch != NpnArch::Prototype {
            return;
        }
        let (d, m) = (self.dim, self.width);
        let l = self.side_len();
        for k in 0..2 {
            for j in 0..m {
                let nr = (0..d)
                    .map(|t| self.values[k * l + t * m + j].powi(2))
                    .sum::<f64>()
                    .sqrt();
                if nr >= NORM_FLOOR {
                    continue;
                }
                if nr > 0.0 {
                    for t in 0..d {
                        self.values[k * l + t * m + j] *= NORM_FLOOR / nr;
                    }
                } else {
                    self.values[k * l + j] = NORM_FLOOR;
                }
            }
        }
    }

    /// `t_u` optimizer steps on one batch with fixed embeddings.
    pub fn multi_update(
        &mut self,
        e1: &Mat,
        e2: &Mat,
        cfg: &GclConfig,
        objective: NpnObjective,
        opt: &mut OptimizerState,
        t_u: usize,
    ) -> Result<()> {
        if t_u == 0 {
            return Err(Error::config("npn.t_u", "must be at least 1"));
        }
        let (g1, g2) = dense_g_values(e1, e2, cfg.tau)?;
        let t1: Vec<f64> = g1.iter().map(|g| (cfg.eps + g).ln()).collect();
        let t2: Vec<f64> = g2.iter().map(|g| (cfg.eps + g).ln()).collect();
        for _ in 0..t_u {
            let grad = match objective {
                NpnObjective::Unified => self.unified_grad_given(e1, e2, cfg, &g1, &g2)?,
                NpnObjective::Separate => self.separate_grad(e1, e2, cfg, &t1, &t2)?,
            };
            self.apply(opt, &grad)?;
        }
        Ok(())
    }

    /// One optimizer step; a non-finite gradient is reported by block.
    pub fn apply(&mut self, opt: &mut OptimizerState, grad: &[f64]) -> Result<()> {
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                block: self.block_of(i).to_string(),
            });
        }
        opt.step(&mut self.values, grad, "npn")?;
        self.enforce_norm_floor();
        Ok(())
    }

    /// Estimation error of the predictions against batch normalizers.
    pub fn batch_estimation_error(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig) -> Result<f64> {
        let (a1, a2) = self.forward(e1, e2, cfg)?;
        let (g1, g2) = dense_g_values(e1, e2, cfg.tau)?;
        let u1: Vec<f64> = g1.iter().map(|g| cfg.eps + g).collect();
        let u2: Vec<f64> = g2.iter().map(|g| cfg.eps + g).collect();
        Ok(0.5 * (estimation_error(&a1, &u1)? + estimation_error(&a2, &u2)?))
    }
}

impl AlphaMap for NpnParams {
    fn alpha_vjp(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, da1: &[f64], da2: &[f64]) -> Result<(Mat, Mat)> {
        self.alpha_vjp_with(e1, e2, cfg, da1, da2)
    }
}

impl NpnParams {
    /// Input gradient of `sum_i da1_i alpha1_i + da2_i alpha2_i`.
    pub fn alpha_vjp_with(&self, e1: &Mat, e2: &Mat, cfg: &GclConfig, da1: &[f64], da2: &[f64]) -> Result<(Mat, Mat)> {
        self.check_inputs(e1, e2)?;
        match self.arch {
            NpnArch::Prototype => {
                let s1 = self.proto_side(0, e1, e2, cfg)?;
                let (mut d1, mut d2) = self.proto_input_grad(0, e1, e2, &s1, da1, cfg.tau);
                let s2 = self.proto_side(1, e2, e1, cfg)?;
                let (a2, p1) = self.proto_input_grad(1, e2, e1, &s2, da2, cfg.tau);
                add_into(&mut d1, &p1);
                add_into(&mut d2, &a2);
                Ok((d1, d2))
            }
            NpnArch::Mlp => {
                let x = concat(e1, e2);
                let (b, d) = e1.shape();
                let mut d1 = Mat::zeros(b, d);
                let mut d2 = Mat::zeros(b, d);
                for (k, da) in [da1, da2].into_iter().enumerate() {
                    let side = self.mlp_side(k, &x);
                    let (_, dx) = self.mlp_backward(k, &side, da);
                    for i in 0..b {
                        let r = dx.row(i);
                        for (o, v) in d1.row_mut(i).iter_mut().zip(&r[..d]) {
                            *o += v;
                        }
                        for (o, v) in d2.row_mut(i).iter_mut().zip(&r[d..]) {
                            *o += v;
                        }
                    }
                }
                Ok((d1, d2))
            }
        }
    }
}

fn concat(e1: &Mat, e2: &Mat) -> Mat {
    let (b, d) = e1.shape();
    let mut x = Mat::zeros(b, 2 * d);
    for i in 0..b {
        let r = x.row_mut(i);
        r[..d].copy_from_slice(e1.row(i));
        r[d..].copy_from_slice(e2.row(i));
    }
    x
}

fn col_sums(m: &Mat) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (o, v) in s.iter_mut().zip(m.row(i)) {
            *o += v;
        }
    }
    s
}

fn add_into(a: &mut Mat, b: &Mat) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}
