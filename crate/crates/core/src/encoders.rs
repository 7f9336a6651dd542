//! Image and text towers that map raw features (or sample ids) to unit-norm
//! embeddings, with the matching backward pass.
//!
//! Parameters for both towers live in one flat vector so optimizers and
//! checkpoints can treat them as a single block; [`TowerLayout`] records
//! where each tower's tensors sit.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{checksum, dot, Mat, Rng, NORM_FLOOR};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Free per-sample embedding table.
    Direct,
    /// Affine map from raw features.
    Linear,
    /// One tanh hidden layer.
    Mlp1,
}

impl EncoderKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(EncoderKind::Direct),
            "linear" => Some(EncoderKind::Linear),
            "mlp1" => Some(EncoderKind::Mlp1),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Direct => "direct",
            EncoderKind::Linear => "linear",
            EncoderKind::Mlp1 => "mlp1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Offsets of one tower's tensors inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerLayout {
    pub kind: EncoderKind,
    /// Raw feature dimension, or table size for `Direct`.
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub offset: usize,
}

impl TowerLayout {
    fn new(kind: EncoderKind, input: usize, hidden: usize, output: usize, offset: usize) -> Self {
        TowerLayout {
            kind,
            input,
            hidden,
            output,
            offset,
        }
    }

    pub fn len(&self) -> usize {
        match self.kind {
            EncoderKind::Direct | EncoderKind::Linear => {
                self.input * self.output
                    + if self.kind == EncoderKind::Linear {
                        self.output
                    } else {
                        0
                    }
            }
            EncoderKind::Mlp1 => self.input * self.hidden + self.hidden + self.hidden * self.output + self.output,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named tensor ranges `(name, range, shape)` relative to the flat vector.
    pub fn blocks(&self, prefix: &str) -> Vec<(String, Range<usize>, Vec<usize>)> {
        let o = self.offset;
        match self.kind {
            EncoderKind::Direct => vec![(
                format!("{prefix}.table"),
                o..o + self.input * self.output,
                vec![self.input, self.output],
            )],
            EncoderKind::Linear => {
                let w = self.input * self.output;
                vec![
                    (format!("{prefix}.weight"), o..o + w, vec![self.input, self.output]),
                    (format!("{prefix}.bias"), o + w..o + w + self.output, vec![self.output]),
                ]
            }
            EncoderKind::Mlp1 => {
                let w1 = self.input * self.hidden;
                let b1 = o + w1;
                let w2 = b1 + self.hidden;
                let b2 = w2 + self.hidden * self.output;
                vec![
                    (format!("{prefix}.w1"), o..b1, vec![self.input, self.hidden]),
                    (format!("{prefix}.b1"), b1..w2, vec![self.hidden]),
                    (format!("{prefix}.w2"), w2..b2, vec![self.hidden, self.output]),
                    (format!("{prefix}.b2"), b2..b2 + self.output, vec![self.output]),
                ]
            }
        }
    }
}

/// Both towers' parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    pub image: TowerLayout,
    pub text: TowerLayout,
    pub values: Vec<f64>,
}

/// Construction arguments for [`EncoderParams::init`].
#[derive(Debug, Clone, Copy)]
pub struct EncoderShape {
    pub kind: EncoderKind,
    /// Number of samples; sizes the `Direct` tables.
    pub n: usize,
    pub raw_image: usize,
    pub raw_text: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl EncoderParams {
    /// Uniform(-0.1, 0.1) initialization from `rng`.
    pub fn init(shape: EncoderShape, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.values.iter_mut() {
            *v = rng.uniform_range(-0.1, 0.1);
        }
        p
    }

    pub fn zeros(shape: EncoderShape) -> Self {
        let (in_i, in_t) = match shape.kind {
            EncoderKind::Direct => (shape.n, shape.n),
            _ => (shape.raw_image, shape.raw_text),
        };
        let image = TowerLayout::new(shape.kind, in_i, shape.hidden, shape.dim, 0);
        let text = TowerLayout::new(shape.kind, in_t, shape.hidden, shape.dim, image.len());
        let total = image.len() + text.len();
        EncoderParams {
            kind: shape.kind,
            image,
            text,
            values: vec![0.0; total],
        }
    }

    /// Direct encoder from explicit embedding tables (rows are samples).
    pub fn direct(image_table: &Mat, text_table: &Mat) -> Result<Self> {
        if image_table.shape() != text_table.shape() {
            return Err(Error::DimensionMismatch("direct tables differ in shape".into()));
        }
        let (n, d) = image_table.shape();
        let mut p = Self::zeros(EncoderShape {
            kind: EncoderKind::Direct,
            n,
            raw_image: 0,
            raw_text: 0,
            hidden: 0,
            dim: d,
        });
        p.values[..n * d].copy_from_slice(image_table.as_slice());
        p.values[n * d..].copy_from_slice(text_table.as_slice());
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.image.output
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fingerprint(&self) -> u64 {
        checksum(&self.values)
    }

    pub fn blocks(&self) -> Vec<(String, Range<usize>, Vec<usize>)> {
        let mut b = self.image.blocks("encoder.image");
        b.extend(self.text.blocks("encoder.text"));
        b
    }

    fn tower(&self, m: Modality) -> &TowerLayout {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }
}

/// Forward cache for one tower.
#[derive(Debug, Clone)]
pub struct TowerCache {
    /// Raw inputs of the batch (empty for `Direct`).
    pub input: Mat,
    /// Hidden activations after tanh (`Mlp1` only).
    pub hidden: Mat,
    /// Pre-normalization outputs.
    pub pre: Mat,
    pub norms: Vec<f64>,
}

/// Unit-norm embeddings for a batch plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    pub indices: Vec<usize>,
    pub e1: Mat,
    pub e2: Mat,
    pub image_cache: TowerCache,
    pub text_cache: TowerCache,
    fingerprint: u64,
}

/// Raw features of the whole dataset, one row per sample.
#[derive(Debug, Clone, Copy)]
pub struct RawViews<'a> {
    pub image: &'a Mat,
    pub text: &'a Mat,
}

fn tower_forward(layout: &TowerLayout, values: &[f64], raw: &Mat, indices: &[usize]) -> Result<TowerCache> {
    let d = layout.output;
    let b = indices.len();
    let (input, hidden, pre) = match layout.kind {
        EncoderKind::Direct => {
            let mut pre = Mat::zeros(b, d);
            for (r, &i) in indices.iter().enumerate() {
                if i >= layout.input {
                    return Err(Error::DimensionMismatch(format!(
                        "sample id {i} outside table of {} rows",
                        layout.input
                    )));
                }
                let off = layout.offset + i * d;
                pre.row_mut(r).copy_from_slice(&values[off..off + d]);
            }
            (Mat::zeros(0, 0), Mat::zeros(0, 0), pre)
        }
        EncoderKind::Linear | EncoderKind::Mlp1 => {
            if raw.cols() != layout.input {
                return Err(Error::DimensionMismatch(format!(
                    "raw features have {} columns, tower expects {}",
                    raw.cols(),
                    layout.input
                )));
            }
            if let Some(&bad) = indices.iter().find(|&&i| i >= raw.rows()) {
                return Err(Error::DimensionMismatch(format!("sample id {bad} outside dataset")));
            }
            let x = raw.gather_rows(indices);
            let blocks = layout.blocks("");
            if layout.kind == EncoderKind::Linear {
                let pre = affine(&x, &values[blocks[0].1.clone()], &values[blocks[1].1.clone()], d)?;
                (x, Mat::zeros(0, 0), pre)
            } else {
                let mut h = affine(
                    &x,
                    &values[blocks[0].1.clone()],
                    &values[blocks[1].1.clone()],
                    layout.hidden,
                )?;
                for v in h.as_mut_slice() {
                    *v = v.tanh();
                }
                let pre = affine(&h, &values[blocks[2].1.clone()], &values[blocks[3].1.clone()], d)?;
                (x, h, pre)
            }
        }
    };
    let norms: Vec<f64> = (0..b).map(|r| dot(pre.row(r), pre.row(r)).sqrt()).collect();
    if norms.iter().any(|&nv| nv < NORM_FLOOR) {
        return Err(Error::ZeroNorm);
    }
    Ok(TowerCache {
        input,
        hidden,
        pre,
        norms,
    })
}

fn affine(x: &Mat, w: &[f64], b: &[f64], out: usize) -> Result<Mat> {
    let w = Mat::from_vec(x.cols(), out, w.to_vec())?;
    let mut y = x.matmul(&w)?;
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

fn normalized(cache: &TowerCache) -> Mat {
    let mut e = cache.pre.clone();
    for r in 0..e.rows() {
        let inv = 1.0 / cache.norms[r];
        for v in e.row_mut(r) {
            *v *= inv;
        }
    }
    e
}

/// Encodes the samples `indices` of both modalities.
pub fn encode(params: &EncoderParams, raw: RawViews<'_>, indices: &[usize]) -> Result<EmbeddingBatch> {
    let image_cache = tower_forward(&params.image, &params.values, raw.image, indices)?;
    let text_cache = tower_forward(&params.text, &params.values, raw.text, indices)?;
    Ok(EmbeddingBatch {
        indices: indices.to_vec(),
        e1: normalized(&image_cache),
        e2: normalized(&text_cache),
        image_cache,
        text_cache,
        fingerprint: params.fingerprint(),
    })
}

/// Pulls `de` back through `e = v / |v|`: `(I - e e^T) de / |v|` per row.
pub fn normalize_backward(e: &Mat, norms: &[f64], de: &Mat) -> Mat {
    let d = e.cols();
    let mut dv = Mat::zeros(e.rows(), d);
    par::for_each_chunk(dv.as_mut_slice(), d.max(1), |r, out| {
        let er = e.row(r);
        let g = de.row(r);
        let radial = dot(er, g);
        let inv = 1.0 / norms[r];
        for k in 0..d {
            out[k] = (g[k] - radial * er[k]) * inv;
        }
    });
    dv
}

fn tower_backward(
    layout: &TowerLayout,
    values: &[f64],
    cache: &TowerCache,
    e: &Mat,
    indices: &[usize],
    de: &Mat,
    grad: &mut [f64],
) -> Result<()> {
    if de.shape() != e.shape() {
        return Err(Error::DimensionMismatch("embedding gradient shape".into()));
    }
    let dv = normalize_backward(e, &cache.norms, de);
    let d = layout.output;
    match layout.kind {
        EncoderKind::Direct => {
            for (r, &i) in indices.iter().enumerate() {
                let off = layout.offset + i * d;
                for (g, v) in grad[off..off + d].iter_mut().zip(dv.row(r)) {
                    *g += v;
                }
            }
        }
        EncoderKind::Linear => {
            let blocks = layout.blocks("");
            accumulate_affine_grad(&cache.input, &dv, grad, blocks[0].1.clone(), blocks[1].1.clone())?;
        }
        EncoderKind::Mlp1 => {
            let blocks = layout.blocks("");
            accumulate_affine_grad(&cache.hidden, &dv, grad, blocks[2].1.clone(), blocks[3].1.clone())?;
            // dh = dv W2^T, then through tanh.
            let w2 = Mat::from_vec(layout.hidden, d, values[blocks[2].1.clone()].to_vec())?;
            let mut dz = dv.matmul(&w2.transpose())?;
            for r in 0..dz.rows() {
                let h = cache.hidden.row(r);
                for (g, hv) in dz.row_mut(r).iter_mut().zip(h) {
                    *g *= 1.0 - hv * hv;
                }
            }
            accumulate_affine_grad(&cache.input, &dz, grad, blocks[0].1.clone(), blocks[1].1.clone())?;
        }
    }
    Ok(())
}

fn accumulate_affine_grad(x: &Mat, dy: &Mat, grad: &mut [f64], w: Range<usize>, b: Range<usize>) -> Result<()> {
    let dw = x.transpose().matmul(dy)?;
    for (g, v) in grad[w].iter_mut().zip(dw.as_slice()) {
        *g += v;
    }
    let gb = &mut grad[b];
    for r in 0..dy.rows() {
        for (g, v) in gb.iter_mut().zip(dy.row(r)) {
            *g += v;
        }
    }
    Ok(())
}

/// Gradient with respect to `params.values` given gradients on the emitted
/// unit-norm embeddings.
pub fn encode_backward(params: &EncoderParams, batch: &EmbeddingBatch, de1: &Mat, de2: &Mat) -> Result<Vec<f64>> {
    if batch.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let mut grad = vec![0.0; params.len()];
    tower_backward(
        &params.image,
        &params.values,
        &batch.image_cache,
        &batch.e1,
        &batch.indices,
        de1,
        &mut grad,
    )?;
    tower_backward(
        &params.text,
        &params.values,
        &batch.text_cache,
        &batch.e2,
        &batch.indices,
        de2,
        &mut grad,
    )?;
    Ok(grad)
}

/// Embeds every sample in chunks of `chunk` rows; returns `(E1, E2)`.
pub fn encode_all(params: &EncoderParams, raw: RawViews<'_>, n: usize, chunk: usize) -> Result<(Mat, Mat)> {
    let d = params.dim();
    let mut e1 = Mat::zeros(n, d);
    let mut e2 = Mat::zeros(n, d);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let b = encode(params, raw, &idx)?;
        e1.as_mut_slice()[start * d..end * d].copy_from_slice(b.e1.as_slice());
        e2.as_mut_slice()[start * d..end * d].copy_from_slice(b.e2.as_slice());
        start = end;
    }
    Ok((e1, e2))
}

impl EncoderParams {
    /// Name of the tensor holding flat index `i`.
    pub fn block_of(&self, i: usize) -> String {
        self.blocks()
            .into_iter()
            .find(|(_, r, _)| r.contains(&i))
            .map(|(n, _, _)| n)
            .unwrap_or_else(|| "encoder".into())
    }

    pub fn modality_len(&self, m: Modality) -> usize {
        self.tower(m).len()
    }
}
