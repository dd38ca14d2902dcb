//! Desk-scale metrics over a fixed random feature extractor.
//!
//! Absolute values are only meaningful relative to each other: the extractor
//! is a seeded, untrained conv net rather than a pretrained classifier.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore};
use crate::tensor::Tensor;

pub const EXTRACTOR_SEED: u64 = 0x5EED_F1D0;
pub const FEATURE_DIM: usize = 64;
const BATCH: usize = 64;

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, with the trace of the square root
/// taken as `Σ √λ` of `√Σ1·Σ2·√Σ1` and negative eigenvalues clamped to 0.
pub fn frechet_distance(mu1: &[f64], s1: &DMatrix<f64>, mu2: &[f64], s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::Shape(format!("Fréchet inputs of dimension {d} disagree")));
    }
    if mu1.iter().chain(mu2).chain(s1.iter()).chain(s2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite Gaussian statistics".into()));
    }
    let sym = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    let e1 = SymmetricEigen::new(sym(s1));
    let root = e1.eigenvectors.clone()
        * DMatrix::from_diagonal(&e1.eigenvalues.map(|l| l.max(0.0).sqrt()))
        * e1.eigenvectors.transpose();
    let m = sym(&(&root * s2 * &root));
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((diff + s1.trace() + s2.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Mean and unbiased covariance of row vectors.
pub fn gaussian_fit(rows: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a Gaussian fit needs at least 2 samples, got {n}")));
    }
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mu: DVector<f64> = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu.iter().copied().collect(), cov))
}

/// Fixed random conv net: three strided 3×3 convs with leaky ReLU, then
/// average pooling to 2×2 over 16 channels.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    params: ParamStore<f64>,
    channels: usize,
}

impl FeatureExtractor {
    pub fn new(img_channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        nn::add_conv(&mut params, &mut init, "feat.c0", img_channels, 16, 3, true);
        nn::add_conv(&mut params, &mut init, "feat.c1", 16, 16, 3, true);
        nn::add_conv(&mut params, &mut init, "feat.c2", 16, 16, 3, true);
        for n in ["feat.c0.bias", "feat.c1.bias", "feat.c2.bias"] {
            let b = init.normal(&[16], 0.1);
            params.insert(n, b);
        }
        Self { params, channels: img_channels }
    }

    pub fn standard(img_channels: usize) -> Self {
        Self::new(img_channels, EXTRACTOR_SEED)
    }

    /// One `FEATURE_DIM` vector per `[C, H, W]` frame.
    pub fn features(&self, frames: &[&Tensor<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(BATCH) {
            let s = chunk[0].shape();
            if s.len() != 3 || s[0] != self.channels || s[1] != s[2] || s[1] < 8 || !s[1].is_power_of_two() {
                return Err(Error::Shape(format!("feature extractor needs square power-of-two frames >= 8, got {s:?}")));
            }
            let x = Tensor::stack(&chunk.iter().map(|f| (*f).clone()).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let b = self.params.bind_all(&mut g, false);
            let mut h = g.constant(x);
            for (i, stride) in [(0, 2), (1, 2), (2, 1)] {
                h = nn::conv(&mut g, &b, &format!("feat.c{i}"), h, stride)?;
                h = nn::lrelu(&mut g, h);
            }
            while g.shape(h)[2] > 2 {
                h = g.avg_pool2x(h)?;
            }
            let v = g.value(h);
            out.extend((0..chunk.len()).map(|r| v.row(r).to_vec()));
        }
        Ok(out)
    }
}

pub fn fid_proxy(extractor: &FeatureExtractor, a: &[&Tensor<f64>], b: &[&Tensor<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("fid_proxy needs at least 2 frames per set".into()));
    }
    let (m1, s1) = gaussian_fit(&extractor.features(a)?)?;
    let (m2, s2) = gaussian_fit(&extractor.features(b)?)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// `[mean of frame features, mean of consecutive feature differences]` over
/// the first `clip_len` frames.
pub fn clip_feature(extractor: &FeatureExtractor, clip: &[Tensor<f64>], clip_len: usize) -> Result<Vec<f64>> {
    if clip_len < 2 || clip.len() < clip_len {
        return Err(Error::InvalidArgument(format!("clip of {} frames is shorter than {clip_len}", clip.len())));
    }
    let refs: Vec<&Tensor<f64>> = clip[..clip_len].iter().collect();
    clip_feature_from(&extractor.features(&refs)?)
}

/// [`clip_feature`] from precomputed per-frame features.
pub fn clip_feature_from(feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::InvalidArgument("clip feature needs at least 2 frames".into()));
    }
    let d = feats[0].len();
    let mut out = vec![0.0; 2 * d];
    for f in feats {
        for j in 0..d {
            out[j] += f[j] / n as f64;
        }
    }
    for w in feats.windows(2) {
        for j in 0..d {
            out[d + j] += (w[1][j] - w[0][j]) / (n - 1) as f64;
        }
    }
    Ok(out)
}

pub fn fvd_proxy(extractor: &FeatureExtractor, a: &[Vec<Tensor<f64>>], b: &[Vec<Tensor<f64>>], clip_len: usize) -> Result<f64> {
    let fa = a.iter().map(|c| clip_feature(extractor, c, clip_len)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|c| clip_feature(extractor, c, clip_len)).collect::<Result<Vec<_>>>()?;
    let (m1, s1) = gaussian_fit(&fa)?;
    let (m2, s2) = gaussian_fit(&fb)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Feature distance between the first and last frame.
pub fn identity_drift(extractor: &FeatureExtractor, clip: &[Tensor<f64>]) -> Result<f64> {
    if clip.len() < 2 {
        return Err(Error::InvalidArgument("identity drift needs at least 2 frames".into()));
    }
    let f = extractor.features(&[&clip[0], &clip[clip.len() - 1]])?;
    Ok(f[0].iter().zip(&f[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `‖w₁ − w₀‖ / median_t ‖w_{t+1} − w_t‖`; a constant sequence scores 0.
pub fn latent_jump(latents: &[Vec<f64>]) -> Result<f64> {
    if latents.len() < 2 {
        return Err(Error::InvalidArgument("latent jump needs at least 2 latents".into()));
    }
    let steps: Vec<f64> = latents
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let first = steps[0];
    let med = median(steps);
    Ok(if first == 0.0 {
        0.0
    } else if med == 0.0 {
        f64::INFINITY
    } else {
        first / med
    })
}

/// Named metric values, printable as `key=value` lines or JSON.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn to_lines(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Non-finite values, which JSON numbers cannot hold, are written as the
    /// strings `"inf"`, `"-inf"` and `"NaN"`.
    pub fn to_json(&self) -> String {
        let map: serde_json::Map<String, serde_json::Value> = self
            .values
            .iter()
            .map(|(k, &v)| {
                let value = serde_json::Number::from_f64(v).map_or_else(|| serde_json::Value::String(format!("{v}")), Into::into);
                (k.clone(), value)
            })
            .collect();
        serde_json::to_string_pretty(&map).expect("string keys serialise")
    }
}
