//! Evaluation on the full training set: exact loss, retrieval recall and
//! the accuracy of each method's normalizer estimates.

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_all, RawViews};
use crate::error::{Error, Result};
use crate::estimators::estimation_error;
use crate::numerics::{Mat, Rng};
use crate::objective::{dense_g_values, report_from_g, GclConfig};
use crate::par;
use crate::trainers::{Estimator, Method, TrainState, TrainerConfig};

/// Recall@k in each direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recall {
    pub image_to_text: f64,
    pub text_to_image: f64,
}

impl Recall {
    pub fn mean(&self) -> f64 {
        0.5 * (self.image_to_text + self.text_to_image)
    }
}

/// Zero-based rank of `scores[target]`; equal scores at lower indices rank
/// ahead.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

fn normalized(e: &Mat) -> Mat {
    let mut out = e.clone();
    for i in 0..out.rows() {
        let nr = crate::numerics::norm(out.row(i));
        if nr > 0.0 {
            out.row_mut(i).iter_mut().for_each(|x| *x /= nr);
        }
    }
    out
}

/// Rank of `b_i` among all rows of `b` when scored against `a_i`.
fn block_ranks(a: &Mat, b: &Mat) -> Vec<usize> {
    const BLOCK: usize = 256;
    let n = a.rows();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let s = a.gather_rows(&idx).matmul_t(b).expect("same dim");
        out.extend(par::map_indexed(end - start, |r| rank_of(s.row(r), start + r)));
        start = end;
    }
    out
}

/// Recall@k for each `k` in `ks`, ranking partners by cosine similarity.
pub fn eval_retrieval_multi(e1: &Mat, e2: &Mat, ks: &[usize]) -> Vec<Recall> {
    let n = e1.rows();
    if n == 0 {
        return ks
            .iter()
            .map(|_| Recall {
                image_to_text: 0.0,
                text_to_image: 0.0,
            })
            .collect();
    }
    let a = normalized(e1);
    let b = normalized(e2);
    let row_ranks = block_ranks(&a, &b);
    let col_ranks = block_ranks(&b, &a);
    let ranks: Vec<(usize, usize)> = row_ranks.into_iter().zip(col_ranks).collect();
    ks.iter()
        .map(|&k| {
            let i2t = ranks.iter().filter(|r| r.0 < k).count();
            let t2i = ranks.iter().filter(|r| r.1 < k).count();
            Recall {
                image_to_text: i2t as f64 / n as f64,
                text_to_image: t2i as f64 / n as f64,
            }
        })
        .collect()
}

pub fn eval_retrieval(e1: &Mat, e2: &Mat, k: usize) -> Recall {
    eval_retrieval_multi(e1, e2, &[k])[0]
}

/// Stream id for the evaluation partition at `step`.
fn eval_stream(step: u64) -> u64 {
    (1u64 << 40) | step
}

/// Per-batch log-normalizers over a shuffled partition of all samples into
/// batches of `batch`; a leftover single sample joins the previous batch.
pub fn minibatch_log_normalizers(
    e1: &Mat,
    e2: &Mat,
    gcl: &GclConfig,
    batch: usize,
    rng: &mut Rng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = e1.rows();
    let perm = rng.permutation(n);
    let b = batch.max(2);
    let mut bounds: Vec<(usize, usize)> = (0..n).step_by(b).map(|s| (s, (s + b).min(n))).collect();
    if bounds.len() > 1 && bounds.last().is_some_and(|&(s, e)| e - s < 2) {
        let (_, e) = bounds.pop().expect("nonempty");
        bounds.last_mut().expect("nonempty").1 = e;
    }
    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    for (s, e) in bounds {
        let c = &perm[s..e];
        let (g1, g2) = dense_g_values(&e1.gather_rows(c), &e2.gather_rows(c), gcl.tau)?;
        for (k, &i) in c.iter().enumerate() {
            a1[i] = (gcl.eps + g1[k]).ln();
            a2[i] = (gcl.eps + g2[k]).ln();
        }
    }
    Ok((a1, a2))
}

/// Predicted log-normalizers of the method, with the sample ids they cover.
pub fn predicted_log_normalizers(
    state: &TrainState,
    cfg: &TrainerConfig,
    e1: &Mat,
    e2: &Mat,
    seed: u64,
) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
    let gcl = cfg.gcl.with_tau(state.tau());
    let n = e1.rows();
    match (&state.estimator, cfg.method) {
        (Estimator::None, _) | (_, Method::Minibatch) => {
            let mut rng = Rng::with_stream(seed, eval_stream(state.step));
            let (a1, a2) = minibatch_log_normalizers(e1, e2, &gcl, cfg.batch_size, &mut rng)?;
            Ok(((0..n).collect(), a1, a2))
        }
        (Estimator::Ema(ema), _) => {
            let ids: Vec<usize> = (0..n).filter(|&i| ema.initialized[i]).collect();
            let a1 = ids.iter().map(|&i| ema.u1[i].ln()).collect();
            let a2 = ids.iter().map(|&i| ema.u2[i].ln()).collect();
            Ok((ids, a1, a2))
        }
        (Estimator::Npn { net, .. }, _) => {
            let (a1, a2) = net.forward_all(e1, e2, &gcl, 1024)?;
            Ok(((0..n).collect(), a1, a2))
        }
    }
}

/// Both-side estimation error of predictions on `ids` against exact
/// normalizers `u1`, `u2` of all samples.
pub fn estimation_error_on(ids: &[usize], a1: &[f64], a2: &[f64], u1: &[f64], u2: &[f64]) -> Result<f64> {
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    let t1: Vec<f64> = ids.iter().map(|&i| u1[i]).collect();
    let t2: Vec<f64> = ids.iter().map(|&i| u2[i]).collect();
    Ok(0.5 * (estimation_error(a1, &t1)? + estimation_error(a2, &t2)?))
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub samples_seen: u64,
    pub gcl_value_on_eval_pool: f64,
    #[serde(rename = "recall@1")]
    pub recall_at_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_at_5: f64,
    /// `None` before any sample has a moving-average estimate.
    pub estimation_error: Option<f64>,
    pub tau: f64,
    pub wall_ms: u64,
}

/// Full-dataset evaluation of `state`. Recall is the mean of both
/// directions.
pub fn evaluate(
    state: &TrainState,
    cfg: &TrainerConfig,
    raw: RawViews<'_>,
    seed: u64,
    wall_ms: u64,
) -> Result<EvalRecord> {
    let n = raw.image.rows();
    let (e1, e2) = encode_all(&state.encoder, raw, n, 1024)?;
    let gcl = cfg.gcl.with_tau(state.tau());
    let (g1, g2) = dense_g_values(&e1, &e2, gcl.tau)?;
    let u1: Vec<f64> = g1.iter().map(|g| gcl.eps + g).collect();
    let u2: Vec<f64> = g2.iter().map(|g| gcl.eps + g).collect();
    let report = report_from_g(g1, g2, &gcl);
    let recall = eval_retrieval_multi(&e1, &e2, &[1, 5]);
    let (ids, a1, a2) = predicted_log_normalizers(state, cfg, &e1, &e2, seed)?;
    let est = if ids.is_empty() {
        None
    } else {
        Some(estimation_error_on(&ids, &a1, &a2, &u1, &u2)?)
    };
    Ok(EvalRecord {
        step: state.step,
        samples_seen: state.samples_seen(),
        gcl_value_on_eval_pool: report.total,
        recall_at_1: recall[0].mean(),
        recall_at_5: recall[1].mean(),
        estimation_error: est,
        tau: state.tau(),
        wall_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderKind, EncoderParams, EncoderShape};
    use crate::estimators::oracle_normalizers;
    use crate::estimators::GammaSchedule;
    use crate::numerics::{cosine, dot};

    fn sphere(n: usize, d: usize, rng: &mut Rng) -> Mat {
        let mut m = Mat::zeros(n, d);
        for i in 0..n {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let nr = crate::numerics::norm(&v);
            m.row_mut(i).iter_mut().zip(&v).for_each(|(o, x)| *o = x / nr);
        }
        m
    }

    #[test]
    fn identical_views_recall_one() {
        let mut rng = Rng::new(1);
        let e = sphere(50, 6, &mut rng);
        let r = eval_retrieval(&e, &e, 1);
        assert_eq!((r.image_to_text, r.text_to_image), (1.0, 1.0));
        let r = eval_retrieval(&sphere(30, 4, &mut rng), &sphere(30, 4, &mut rng), 30);
        assert_eq!(r.mean(), 1.0);
    }

    #[test]
    fn ties_broken_by_lower_index() {
        let e1 = Mat::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let r = eval_retrieval(&e1, &e1, 1);
        assert_eq!(r.image_to_text, 0.5);
    }

    #[test]
    fn random_embeddings_recall_near_chance() {
        let mut rng = Rng::new(7);
        let n = 1000;
        let mut total = 0.0;
        let reps = 4;
        for _ in 0..reps {
            let r = eval_retrieval(&sphere(n, 8, &mut rng), &sphere(n, 8, &mut rng), 1);
            total += r.mean();
        }
        let mean = total / reps as f64;
        // Binomial(n, 1/n) per direction: mean 1/n, sd about 1/n per run.
        assert!(mean < 5.0 / n as f64, "{mean}");
    }

    #[test]
    fn pair_order_does_not_matter() {
        let mut rng = Rng::new(11);
        let e1 = sphere(40, 5, &mut rng);
        let mut e2 = e1.clone();
        for x in e2.as_mut_slice() {
            *x += 0.4 * rng.normal();
        }
        let perm = rng.permutation(40);
        let a = eval_retrieval_multi(&e1, &e2, &[1, 5]);
        let b = eval_retrieval_multi(&e1.gather_rows(&perm), &e2.gather_rows(&perm), &[1, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn full_batch_unit_gamma_has_zero_error() {
        let n = 12;
        let mut rng = Rng::new(3);
        let image = sphere(n, 4, &mut rng);
        let text = sphere(n, 4, &mut rng);
        let raw = RawViews {
            image: &image,
            text: &text,
        };
        let enc = EncoderParams::init(
            EncoderShape {
                kind: EncoderKind::Linear,
                n,
                raw_image: 4,
                raw_text: 4,
                hidden: 0,
                dim: 3,
            },
            &mut rng,
        );
        let cfg = TrainerConfig {
            method: Method::FastClip,
            batch_size: n,
            gamma: GammaSchedule::Constant(1.0),
            tau_lr: 0.0,
            encoder_opt: crate::optim::OptimConfig::adamw(0.0, 0.0),
            ..TrainerConfig::default()
        };
        let mut s = TrainState::new(&cfg, enc, n, 0).unwrap();
        let rec = evaluate(&s, &cfg, raw, 0, 0).unwrap();
        assert_eq!(rec.estimation_error, None);
        s.step(&cfg, raw).unwrap();
        let rec = evaluate(&s, &cfg, raw, 0, 0).unwrap();
        assert!(rec.estimation_error.unwrap() < 1e-28);
    }

    #[test]
    fn network_error_matches_two_loop_recomputation() {
        let n = 64;
        let mut rng = Rng::new(5);
        let image = sphere(n, 6, &mut rng);
        let text = sphere(n, 6, &mut rng);
        let raw = RawViews {
            image: &image,
            text: &text,
        };
        let enc = EncoderParams::init(
            EncoderShape {
                kind: EncoderKind::Linear,
                n,
                raw_image: 6,
                raw_text: 6,
                hidden: 0,
                dim: 4,
            },
            &mut rng,
        );
        let cfg = TrainerConfig {
            method: Method::NeuClip,
            batch_size: 16,
            npn_width: 8,
            ..TrainerConfig::default()
        };
        let s = TrainState::new(&cfg, enc, n, 2).unwrap();
        let rec = evaluate(&s, &cfg, raw, 2, 0).unwrap();
        let (e1, e2) = encode_all(&s.encoder, raw, n, 7).unwrap();
        let Estimator::Npn { net, .. } = &s.estimator else {
            unreachable!()
        };
        let (w1, w2) = (net.w1(), net.w2());
        let tau = s.tau();
        let eps = cfg.gcl.eps;
        let mut err = [0.0; 2];
        for (side, (a, b, w)) in [(&e1, &e2, &w1), (&e2, &e1, &w2)].into_iter().enumerate() {
            for i in 0..n {
                let sii = dot(e1.row(i), e2.row(i));
                let mut g = 0.0;
                for j in 0..n {
                    if j != i {
                        let sij = if side == 0 {
                            dot(a.row(i), b.row(j))
                        } else {
                            dot(b.row(j), a.row(i))
                        };
                        g += ((sij - sii) / tau).exp();
                    }
                }
                let truth = (eps + g / (n - 1) as f64).ln();
                let mut p = 0.0;
                for j in 0..w.cols() {
                    let col: Vec<f64> = (0..w.rows()).map(|t| w.get(t, j)).collect();
                    p += ((cosine(a.row(i), &col).unwrap() - sii) / tau).exp();
                }
                let pred = (eps + p / w.cols() as f64).ln();
                err[side] += (pred - truth).powi(2) / n as f64;
            }
        }
        let want = 0.5 * (err[0] + err[1]);
        assert!((rec.estimation_error.unwrap() - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn minibatch_partition_covers_every_sample() {
        let mut rng = Rng::new(4);
        let e1 = sphere(11, 3, &mut rng);
        let e2 = sphere(11, 3, &mut rng);
        let gcl = GclConfig {
            tau: 0.5,
            ..GclConfig::default()
        };
        let (a1, a2) = minibatch_log_normalizers(&e1, &e2, &gcl, 5, &mut Rng::new(1)).unwrap();
        assert!(a1.iter().chain(&a2).all(|a| a.is_finite() && *a != 0.0));
        let (b1, _) = minibatch_log_normalizers(&e1, &e2, &gcl, 11, &mut Rng::new(1)).unwrap();
        let (o1, _) = oracle_normalizers(&e1, &e2, &gcl).unwrap();
        for i in 0..11 {
            assert!((b1[i] - o1[i].ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn record_serializes_with_published_keys() {
        let r = EvalRecord {
            step: 3,
            samples_seen: 96,
            gcl_value_on_eval_pool: -0.5,
            recall_at_1: 0.25,
            recall_at_5: 0.75,
            estimation_error: Some(0.1),
            tau: 0.07,
            wall_ms: 0,
        };
        let s = serde_json::to_string(&r).unwrap();
        for key in [
            "\"step\"",
            "\"samples_seen\"",
            "\"gcl_value_on_eval_pool\"",
            "\"recall@1\"",
            "\"recall@5\"",
            "\"estimation_error\"",
            "\"tau\"",
            "\"wall_ms\"",
        ] {
            assert!(s.contains(key), "{s}");
        }
        let back: EvalRecord = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
