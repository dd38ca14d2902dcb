//! First-frame-aware acyclic positional encoding.
//!
//! A video is a track of anchor noises `z_i`, one every `anchor_distance`
//! frames. A stack of left-sided (causal) 1-D convolutions maps the anchors to
//! tokens `u_i`; timestamps between anchors interpolate neighbouring tokens
//! with `a(f) = f + β·sin(2πf)/(2π)`. In the first-frame-aware variant `z_0` is a
//! learned constant and every layer's left padding is a learned constant, so
//! `u_0`, and therefore the code at `t = 0`, is the same for every video.

use std::collections::{BTreeMap, BTreeSet};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamStore};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApeVariant {
    /// Constant first anchor and constant padding.
    FirstFrameAware,
    /// Ablation: every anchor, including `z_0` and those left of it, is noise.
    Acyclic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApeConfig {
    pub anchor_distance: f64,
    pub code_dim: usize,
    pub kernel_size: usize,
    pub pad_len: usize,
    pub conv_layers: usize,
    pub variant: ApeVariant,
}

impl Default for ApeConfig {
    fn default() -> Self {
        Self {
            anchor_distance: 32.0,
            code_dim: 64,
            kernel_size: 6,
            pad_len: 5,
            conv_layers: 2,
            variant: ApeVariant::FirstFrameAware,
        }
    }
}

impl ApeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.anchor_distance > 0.0 && self.anchor_distance.is_finite()) {
            return Err(Error::Config(format!("anchor_distance must be positive, got {}", self.anchor_distance)));
        }
        if self.kernel_size == 0 || self.pad_len + 1 != self.kernel_size {
            return Err(Error::Config(format!(
                "pad_len ({}) must equal kernel_size - 1 ({})",
                self.pad_len,
                self.kernel_size.saturating_sub(1)
            )));
        }
        if self.conv_layers == 0 || self.code_dim == 0 {
            return Err(Error::Config("APE needs at least one conv layer and a positive code_dim".into()));
        }
        Ok(())
    }

    /// Number of anchors a token depends on.
    pub fn receptive_field(&self) -> usize {
        self.conv_layers * (self.kernel_size - 1) + 1
    }

    /// `(i, f)` with `t = (i + f)·anchor_distance`, `f ∈ [0, 1)`.
    pub fn segment(&self, t: f64) -> Result<(i64, f64)> {
        if !(t >= 0.0 && t.is_finite()) {
            return Err(Error::InvalidArgument(format!("timestamp {t} must be finite and >= 0")));
        }
        let x = t / self.anchor_distance;
        let i = x.floor();
        Ok((i as i64, x - i))
    }
}

/// Per-video anchor noise source. `overrides` replaces individual anchors and
/// exists so tests can construct tracks that share a window of anchors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorTrack {
    pub video_seed: u64,
    pub overrides: BTreeMap<i64, Vec<f64>>,
}

impl AnchorTrack {
    pub fn new(video_seed: u64) -> Self {
        Self { video_seed, overrides: BTreeMap::new() }
    }

    fn raw(&self, i: i64, dim: usize) -> Vec<f64> {
        match self.overrides.get(&i) {
            Some(v) => v.clone(),
            None => rng::normal_vector(self.video_seed, Stream::Anchor, rng::signed_index(i), dim),
        }
    }
}

/// One encode request: a track (by index) and a timestamp.
#[derive(Clone, Copy, Debug)]
pub struct Query {
    pub track: usize,
    pub t: f64,
}

#[derive(Clone, Debug)]
pub struct FfaApe {
    pub config: ApeConfig,
}

/// Where a sequence element at some layer lives: `(source, row)` for `gather_rows`.
type Slot = (usize, usize);

impl FfaApe {
    pub fn new(config: ApeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn add_params<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let c = &self.config;
        store.insert("ape.c0", init.normal(&[1, c.code_dim], 1.0));
        for l in 0..c.conv_layers {
            store.insert(format!("ape.pad{l}"), init.normal(&[c.pad_len, c.code_dim], 1.0));
            nn::add_dense(store, init, &format!("ape.conv{l}"), c.kernel_size * c.code_dim, c.code_dim, 1.0, 0.0);
        }
        store.insert("ape.interp_s", Tensor::zeros(&[c.code_dim]));
    }

    /// `β_c = σ(s_c)`.
    pub fn beta<T: Scalar>(&self, params: &ParamStore<T>) -> Result<Vec<f64>> {
        Ok(params.expect("ape.interp_s")?.data().iter().map(|s| 1.0 / (1.0 + (-s.re_f64()).exp())).collect())
    }

    /// Anchor `i` of a track: `c0` at `i = 0`, seeded noise for `i ≥ 1`.
    pub fn anchor_noise<T: Scalar>(&self, params: &ParamStore<T>, track: &AnchorTrack, i: i64) -> Result<Vec<T>> {
        if i < 0 {
            return Err(Error::InvalidArgument(format!("anchor index {i} is negative")));
        }
        if i == 0 && self.config.variant == ApeVariant::FirstFrameAware {
            return Ok(params.expect("ape.c0")?.data().to_vec());
        }
        Ok(track.raw(i, self.config.code_dim).into_iter().map(T::lit).collect())
    }

    /// Token rows `[queries.len(), code_dim]` for `(track, anchor index)` pairs.
    pub fn tokens_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tracks: &[AnchorTrack],
        queries: &[(usize, i64)],
    ) -> Result<Var> {
        let c = &self.config;
        let ffa = c.variant == ApeVariant::FirstFrameAware;
        let (k, p, d) = (c.kernel_size, c.pad_len as i64, c.code_dim);
        for &(tr, i) in queries {
            if tr >= tracks.len() {
                return Err(Error::InvalidArgument(format!("track {tr} of {}", tracks.len())));
            }
            if i < 0 {
                return Err(Error::InvalidArgument(format!("token index {i} is negative")));
            }
        }
        // needed[l]: sequence positions whose value at layer l must be computed.
        let layers = c.conv_layers;
        let mut needed: Vec<BTreeSet<(usize, i64)>> = vec![BTreeSet::new(); layers + 1];
        needed[layers] = queries.iter().copied().collect();
        for l in (1..=layers).rev() {
            let below: Vec<(usize, i64)> = needed[l]
                .iter()
                .flat_map(|&(tr, j)| (j - p..=j).map(move |jj| (tr, jj)))
                .filter(|&(_, jj)| !ffa || jj >= 0)
                .collect();
            needed[l - 1].extend(below);
        }

        // Layer-0 inputs: noise rows in one constant; c0 and pads are parameters.
        let noise_keys: Vec<(usize, i64)> =
            needed[0].iter().copied().filter(|&(_, j)| !ffa || j >= 1).collect();
        let mut sources: Vec<Var> = Vec::new();
        let mut level: BTreeMap<(usize, i64), Slot> = BTreeMap::new();
        if !noise_keys.is_empty() {
            let mut data = Vec::with_capacity(noise_keys.len() * d);
            for (row, &(tr, j)) in noise_keys.iter().enumerate() {
                let z = tracks[tr].raw(j, d);
                if z.len() != d {
                    return Err(Error::Shape(format!("anchor override of length {} for code_dim {d}", z.len())));
                }
                data.extend(z.into_iter().map(T::lit));
                level.insert((tr, j), (0, row));
            }
            sources.push(g.constant(Tensor::new(&[noise_keys.len(), d], data)?));
        }
        let c0_src = if ffa {
            sources.push(b.var("ape.c0"));
            Some(sources.len() - 1)
        } else {
            None
        };
        let pad_src: Vec<usize> = if ffa {
            (0..layers)
                .map(|l| {
                    sources.push(b.var(&format!("ape.pad{l}")));
                    sources.len() - 1
                })
                .collect()
        } else {
            Vec::new()
        };
        let slot = |level: &BTreeMap<(usize, i64), Slot>, l: usize, tr: usize, j: i64| -> Slot {
            if ffa && j < 0 {
                (pad_src[l], (j + p) as usize)
            } else if ffa && l == 0 && j == 0 {
                (c0_src.expect("ffa"), 0)
            } else {
                level[&(tr, j)]
            }
        };

        let mut out = None;
        for l in 1..=layers {
            let keys: Vec<(usize, i64)> = needed[l].iter().copied().collect();
            let picks: Vec<Slot> = keys
                .iter()
                .flat_map(|&(tr, j)| (j - p..=j).map(move |jj| (tr, jj)))
                .map(|(tr, jj)| slot(&level, l - 1, tr, jj))
                .collect();
            let windows = g.gather_rows(&sources, &picks)?;
            let windows = g.reshape(windows, &[keys.len(), k * d])?;
            let mut y = nn::dense(g, b, &format!("ape.conv{}", l - 1), windows, 1.0)?;
            if l < layers {
                y = nn::lrelu(g, y);
            }
            sources.push(y);
            let src = sources.len() - 1;
            level = keys.iter().enumerate().map(|(row, &key)| (key, (src, row))).collect();
            out = Some(src);
        }
        let src = out.expect("at least one layer");
        let picks: Vec<Slot> = queries.iter().map(|q| (src, level[q].1)).collect();
        g.gather_rows(&[sources[src]], &picks.iter().map(|&(_, r)| (0, r)).collect::<Vec<_>>())
    }

    /// Motion codes `[queries.len(), code_dim]`.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        tracks: &[AnchorTrack],
        queries: &[Query],
    ) -> Result<Var> {
        let mut token_q = Vec::with_capacity(2 * queries.len());
        let mut fracs = Vec::with_capacity(queries.len());
        for q in queries {
            let (i, f) = self.config.segment(q.t)?;
            token_q.push((q.track, i));
            token_q.push((q.track, i + 1));
            fracs.push(T::lit(f));
        }
        let u = self.tokens_graph(g, b, tracks, &token_q)?;
        let n = queries.len();
        let lo = g.gather_rows(&[u], &(0..n).map(|r| (0, 2 * r)).collect::<Vec<_>>())?;
        let hi = g.gather_rows(&[u], &(0..n).map(|r| (0, 2 * r + 1)).collect::<Vec<_>>())?;
        let a = g.interp_weights(b.var("ape.interp_s"), &fracs);
        let diff = g.sub(hi, lo)?;
        let step = g.mul(a, diff)?;
        g.add(lo, step)
    }

    pub fn token<T: Scalar>(&self, params: &ParamStore<T>, track: &AnchorTrack, i: i64) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let u = self.tokens_graph(&mut g, &b, std::slice::from_ref(track), &[(0, i)])?;
        Ok(g.value(u).data().to_vec())
    }

    pub fn encode<T: Scalar>(&self, params: &ParamStore<T>, track: &AnchorTrack, t: f64) -> Result<Vec<T>> {
        Ok(self.encode_many(params, track, &[t])?.into_data())
    }

    /// Codes for several timestamps of one track, `[ts.len(), code_dim]`.
    pub fn encode_many<T: Scalar>(&self, params: &ParamStore<T>, track: &AnchorTrack, ts: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let qs: Vec<Query> = ts.iter().map(|&t| Query { track: 0, t }).collect();
        let v = self.encode_graph(&mut g, &b, std::slice::from_ref(track), &qs)?;
        Ok(g.value(v).clone())
    }
}
