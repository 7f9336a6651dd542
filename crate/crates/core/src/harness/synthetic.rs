//! Synthetic paired data with latent class structure.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::parse_pairs;
use crate::harness::container::Container;
use crate::numerics::{Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub d_latent: usize,
    pub d_raw_image: usize,
    pub d_raw_text: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 4096,
            k: 64,
            d_latent: 16,
            d_raw_image: 32,
            d_raw_text: 32,
            sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Reads `key = value` lines with keys `n`, `k`, `d_latent`,
    /// `d_raw_image`, `d_raw_text`, `sigma` and `seed`; missing keys keep
    /// their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(key, format!("cannot parse `{v}` as a number")))
        }
        let mut s = SyntheticSpec::default();
        for (_, k, v) in parse_pairs(text)? {
            match k.as_str() {
                "n" => s.n = num(&k, &v)?,
                "k" => s.k = num(&k, &v)?,
                "d_latent" => s.d_latent = num(&k, &v)?,
                "d_raw_image" => s.d_raw_image = num(&k, &v)?,
                "d_raw_text" => s.d_raw_text = num(&k, &v)?,
                "sigma" => s.sigma = num(&k, &v)?,
                "seed" => s.seed = num(&k, &v)?,
                _ => return Err(Error::config(k, "unknown key")),
            }
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.k > self.n {
            return Err(Error::InvalidSpec(format!(
                "need 1 <= k <= n, got k={} n={}",
                self.k, self.n
            )));
        }
        if self.d_latent == 0 || self.d_raw_image == 0 || self.d_raw_text == 0 {
            return Err(Error::InvalidSpec("all dimensions must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "sigma must be finite and >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Aligned raw views with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub raw_image: Mat,
    pub raw_text: Mat,
    pub labels: Vec<usize>,
    /// Latent points behind each view; empty when loaded from a file.
    pub latent_image: Mat,
    pub latent_text: Mat,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        let (n, di) = self.raw_image.shape();
        let dt = self.raw_text.cols();
        c.push("raw_image", &[n, di], self.raw_image.as_slice().to_vec())?;
        c.push("raw_text", &[n, dt], self.raw_text.as_slice().to_vec())?;
        c.push("labels", &[n], self.labels.iter().map(|&l| l as f64).collect())?;
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let img = c.get("raw_image")?;
        let txt = c.get("raw_text")?;
        let lab = c.get("labels")?;
        if img.dims.len() != 2 || txt.dims.len() != 2 || lab.dims.len() != 1 {
            return Err(Error::Format("dataset entries have wrong rank".into()));
        }
        let n = img.dims[0] as usize;
        if txt.dims[0] as usize != n || lab.dims[0] as usize != n {
            return Err(Error::Format("dataset entries disagree on n".into()));
        }
        let labels = lab
            .data
            .iter()
            .map(|&x| {
                if x >= 0.0 && x.fract() == 0.0 {
                    Ok(x as usize)
                } else {
                    Err(Error::Format(format!("label {x} is not a class id")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PairDataset {
            raw_image: Mat::from_vec(n, img.dims[1] as usize, img.data.clone())?,
            raw_text: Mat::from_vec(n, txt.dims[1] as usize, txt.data.clone())?,
            labels,
            latent_image: Mat::zeros(0, 0),
            latent_text: Mat::zeros(0, 0),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

fn unit_normal(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let nr = crate::numerics::norm(&v);
        if nr > 1e-12 {
            return v.into_iter().map(|x| x / nr).collect();
        }
    }
}

/// Class centers uniform on the unit sphere; each view is a fixed Gaussian
/// linear map of `center + sigma * noise`, with independent noise per view.
/// Labels are balanced (`i mod k`) and then shuffled.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<PairDataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let dl = spec.d_latent;
    let centers: Vec<Vec<f64>> = (0..spec.k).map(|_| unit_normal(dl, &mut rng)).collect();
    let scale = 1.0 / (dl as f64).sqrt();
    let map_image = Mat::from_vec(
        dl,
        spec.d_raw_image,
        (0..dl * spec.d_raw_image).map(|_| rng.normal() * scale).collect(),
    )?;
    let map_text = Mat::from_vec(
        dl,
        spec.d_raw_text,
        (0..dl * spec.d_raw_text).map(|_| rng.normal() * scale).collect(),
    )?;
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    rng.shuffle(&mut labels);
    let mut latent_image = Mat::zeros(spec.n, dl);
    let mut latent_text = Mat::zeros(spec.n, dl);
    for (i, &l) in labels.iter().enumerate() {
        let c = &centers[l];
        for t in 0..dl {
            latent_image.set(i, t, c[t] + spec.sigma * rng.normal());
        }
        for t in 0..dl {
            latent_text.set(i, t, c[t] + spec.sigma * rng.normal());
        }
    }
    Ok(PairDataset {
        raw_image: latent_image.matmul(&map_image)?,
        raw_text: latent_text.matmul(&map_text)?,
        labels,
        latent_image,
        latent_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::cosine;

    fn small(sigma: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: 64,
            k: 8,
            d_latent: 5,
            d_raw_image: 7,
            d_raw_text: 6,
            sigma,
            seed,
        }
    }

    #[test]
    fn zero_noise_views_share_latent() {
        let d = gen_synthetic(&small(0.0, 1)).unwrap();
        assert_eq!(d.latent_image, d.latent_text);
        assert_eq!(d.raw_image.shape(), (64, 7));
        assert_eq!(d.raw_text.shape(), (64, 6));
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = gen_synthetic(&small(0.2, 5)).unwrap();
        let b = gen_synthetic(&small(0.2, 5)).unwrap();
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.to_container().unwrap().write_to(&mut ba).unwrap();
        b.to_container().unwrap().write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
        let c = gen_synthetic(&small(0.2, 6)).unwrap();
        assert_ne!(a.raw_image, c.raw_image);
    }

    #[test]
    fn classes_are_balanced() {
        let d = gen_synthetic(&small(0.1, 2)).unwrap();
        let mut counts = [0usize; 8];
        for &l in &d.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 8));
    }

    #[test]
    fn within_class_latents_are_closer() {
        let spec = SyntheticSpec {
            n: 512,
            k: 32,
            d_latent: 16,
            d_raw_image: 16,
            d_raw_text: 16,
            sigma: 0.1,
            seed: 3,
        };
        let d = gen_synthetic(&spec).unwrap();
        let (mut win, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..d.len() {
            for j in (i + 1)..d.len() {
                let c = cosine(d.latent_image.row(i), d.latent_image.row(j)).unwrap();
                if d.labels[i] == d.labels[j] {
                    win += c;
                    nw += 1;
                } else {
                    cross += c;
                    nc += 1;
                }
            }
        }
        assert!(win / nw as f64 > cross / nc as f64 + 0.5);
    }

    #[test]
    fn invalid_specs() {
        let mut s = small(0.1, 0);
        s.k = 65;
        assert!(matches!(gen_synthetic(&s), Err(Error::InvalidSpec(_))));
        let mut s = small(0.1, 0);
        s.d_raw_text = 0;
        assert!(gen_synthetic(&s).is_err());
        let mut s = small(-1.0, 0);
        assert!(gen_synthetic(&s).is_err());
        s.sigma = f64::NAN;
        assert!(gen_synthetic(&s).is_err());
    }

    #[test]
    fn spec_text() {
        let s = SyntheticSpec::parse("n = 100 # pairs\nk = 5\nsigma = 0.5\n").unwrap();
        assert_eq!((s.n, s.k, s.sigma, s.d_latent), (100, 5, 0.5, 16));
        assert!(matches!(SyntheticSpec::parse("m = 3"), Err(Error::Config { .. })));
        assert!(matches!(
            SyntheticSpec::parse("n = 3\nk = 4"),
            Err(Error::InvalidSpec(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let d = gen_synthetic(&small(0.1, 9)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.nckp");
        d.save(&p).unwrap();
        let back = PairDataset::load(&p).unwrap();
        assert_eq!(back.raw_image, d.raw_image);
        assert_eq!(back.raw_text, d.raw_text);
        assert_eq!(back.labels, d.labels);
    }
}
