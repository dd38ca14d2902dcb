//! Style-based image decoder: a mapping MLP `z → w` and a synthesis network
//! that grows a learned 4×4 constant to the output resolution, modulating
//! every conv layer channelwise from `w` and optionally adding per-pixel noise.
//!
//! Parameter names are tiered by resolution (`synthesis.b{res}.…`) so a tier
//! and everything below it can be frozen as a unit.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamStore};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAPPING_LR_MUL: f64 = 0.01;
const AFFINE_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Off,
    ConstantPerVideo,
    Random,
}

impl fmt::Display for NoiseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseMode::Off => "off",
            NoiseMode::ConstantPerVideo => "constant_per_video",
            NoiseMode::Random => "random",
        })
    }
}

impl FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(NoiseMode::Off),
            "constant_per_video" => Ok(NoiseMode::ConstantPerVideo),
            "random" => Ok(NoiseMode::Random),
            other => Err(Error::Config(format!("unknown noise mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub img_resolution: usize,
    pub img_channels: usize,
    /// Channel count at resolution `r` is `clamp(channel_base / r, 1, channel_max)`.
    pub channel_base: usize,
    pub channel_max: usize,
    pub mapping_layers: usize,
    pub layers_per_block: usize,
    pub noise_mode: NoiseMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            z_dim: 64,
            w_dim: 64,
            img_resolution: 64,
            img_channels: 3,
            channel_base: 512,
            channel_max: 64,
            mapping_layers: 4,
            layers_per_block: 2,
            noise_mode: NoiseMode::ConstantPerVideo,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_resolution < 8 || !self.img_resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "img_resolution must be a power of two >= 8, got {}",
                self.img_resolution
            )));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.img_channels == 0 || self.channel_max == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.mapping_layers == 0 || self.layers_per_block == 0 {
            return Err(Error::Config("decoder needs at least one mapping layer and one conv per block".into()));
        }
        Ok(())
    }

    /// Block resolutions from 4 up to the output size.
    pub fn resolutions(&self) -> Vec<usize> {
        std::iter::successors(Some(4usize), |r| Some(r * 2)).take_while(|&r| r <= self.img_resolution).collect()
    }

    pub fn channels(&self, res: usize) -> usize {
        (self.channel_base / res).clamp(1, self.channel_max)
    }

    /// Resolution of every noise-injection site, in synthesis order.
    pub fn noise_sites(&self) -> Vec<usize> {
        self.resolutions().into_iter().flat_map(|r| std::iter::repeat_n(r, self.layers_per_block)).collect()
    }
}

/// A point in the intermediate latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(values: Vec<T>, w_dim: usize) -> Result<Self> {
        if values.len() != w_dim {
            return Err(Error::Shape(format!("latent has {} entries, expected {w_dim}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("latent has non-finite entries".into()));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(&[1, self.values.len()], self.values.clone()).expect("row")
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (*a - *b).re_f64().powi(2)).sum::<f64>().sqrt()
    }
}

/// Stacks latents into a `[B, w_dim]` tensor.
pub fn stack_latents<T: Scalar>(ws: &[LatentCode<T>]) -> Result<Tensor<T>> {
    let dim = ws.first().map(|w| w.dim()).ok_or_else(|| Error::Shape("no latents".into()))?;
    let mut data = Vec::with_capacity(dim * ws.len());
    for w in ws {
        if w.dim() != dim {
            return Err(Error::Shape("latents of differing dimension".into()));
        }
        data.extend_from_slice(&w.values);
    }
    Tensor::new(&[ws.len(), dim], data)
}

/// One noise map `[1, r, r]` per injection site.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRealization<T> {
    pub maps: Vec<Tensor<T>>,
}

/// Batches per-sample noise into `[B, 1, r, r]` per site.
pub fn stack_noise<T: Scalar>(items: &[&NoiseRealization<T>]) -> Result<Vec<Tensor<T>>> {
    let sites = items.first().map(|n| n.maps.len()).ok_or_else(|| Error::Shape("no noise".into()))?;
    (0..sites)
        .map(|s| {
            let maps: Vec<Tensor<T>> = items.iter().map(|n| n.maps[s].clone()).collect();
            let stacked = Tensor::stack(&maps)?;
            let r = maps[0].shape()[1];
            stacked.reshape(&[items.len(), 1, r, r])
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct LatentDecoder<T: Scalar> {
    pub config: DecoderConfig,
    pub params: ParamStore<T>,
    /// Running mean of mapped latents.
    pub w_avg: Vec<T>,
    pub w_avg_count: u64,
}

impl<T: Scalar> LatentDecoder<T> {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let mut params = ParamStore::new();
        let mut din = config.z_dim;
        for i in 0..config.mapping_layers {
            nn::add_dense(&mut params, &mut init, &format!("mapping.fc{i}"), din, config.w_dim, MAPPING_LR_MUL, 0.0);
            din = config.w_dim;
        }
        let mut cin = config.channels(4);
        params.insert("synthesis.b4.const", init.normal(&[cin, 4, 4], 1.0));
        for res in config.resolutions() {
            let cout = config.channels(res);
            for l in 0..config.layers_per_block {
                let p = format!("synthesis.b{res}.conv{l}");
                nn::add_conv(&mut params, &mut init, &p, cin, cout, 3, true);
                params.insert(format!("{p}.affine_scale.weight"), init.normal(&[cout, config.w_dim], AFFINE_INIT_STD));
                params.insert(format!("{p}.affine_scale.bias"), Tensor::zeros(&[cout]));
                params.insert(format!("{p}.affine_shift.weight"), init.normal(&[cout, config.w_dim], AFFINE_INIT_STD));
                params.insert(format!("{p}.affine_shift.bias"), Tensor::zeros(&[cout]));
                params.insert(format!("{p}.noise_strength"), Tensor::zeros(&[1]));
                cin = cout;
            }
        }
        let top = config.img_resolution;
        nn::add_conv(&mut params, &mut init, &format!("synthesis.b{top}.torgb"), cin, config.img_channels, 1, true);
        let w_avg = vec![T::zero(); config.w_dim];
        Ok(Self { config, params, w_avg, w_avg_count: 0 })
    }

    pub fn cast<U: Scalar>(&self) -> LatentDecoder<U> {
        LatentDecoder {
            config: self.config.clone(),
            params: self.params.cast(),
            w_avg: self.w_avg.iter().map(|v| U::lit(v.re_f64())).collect(),
            w_avg_count: self.w_avg_count,
        }
    }

    pub fn mapping_graph(&self, g: &mut Graph<T>, b: &Bound, z: Var) -> Result<Var> {
        if g.shape(z).get(1) != Some(&self.config.z_dim) || g.shape(z).len() != 2 {
            return Err(Error::Shape(format!("z must be [B, {}], got {:?}", self.config.z_dim, g.shape(z))));
        }
        let mut x = z;
        for i in 0..self.config.mapping_layers {
            x = nn::dense(g, b, &format!("mapping.fc{i}"), x, MAPPING_LR_MUL)?;
            if i + 1 < self.config.mapping_layers {
                x = nn::lrelu(g, x);
            }
        }
        Ok(x)
    }

    /// Synthesis from `w: [B, w_dim]`. `noise` holds one `[B, 1, r, r]` map per
    /// site and is ignored when noise is off. When `taps` is given, the output
    /// of every block is appended in resolution order.
    pub fn synthesis_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        w: Var,
        noise: Option<&[Tensor<T>]>,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let ws = g.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != cfg.w_dim {
            return Err(Error::Shape(format!("w must be [B, {}], got {ws:?}", cfg.w_dim)));
        }
        let batch = ws[0];
        let noise = match (cfg.noise_mode, noise) {
            (NoiseMode::Off, _) => None,
            (_, None) => {
                return Err(Error::Config(format!("noise mode {} requires a noise realization", cfg.noise_mode)))
            }
            (_, Some(n)) => {
                let sites = cfg.noise_sites();
                if n.len() != sites.len() {
                    return Err(Error::Shape(format!("{} noise maps for {} sites", n.len(), sites.len())));
                }
                for (t, &r) in n.iter().zip(&sites) {
                    if t.shape() != [batch, 1, r, r] {
                        return Err(Error::Shape(format!("noise map {:?} for site {r}x{r}, batch {batch}", t.shape())));
                    }
                }
                Some(n)
            }
        };
        let c4 = cfg.channels(4);
        let konst = b.var("synthesis.b4.const");
        let konst = g.reshape(konst, &[1, c4, 4, 4])?;
        let mut x = g.gather_rows(&[konst], &vec![(0, 0); batch])?;
        let mut site = 0;
        for res in cfg.resolutions() {
            for l in 0..cfg.layers_per_block {
                let p = format!("synthesis.b{res}.conv{l}");
                if l == 0 && res > 4 {
                    x = g.upsample2x(x)?;
                }
                x = nn::conv(g, b, &p, x, 1)?;
                let raw = nn::dense(g, b, &format!("{p}.affine_scale"), w, 1.0)?;
                let scale = g.affine(raw, T::one(), T::one());
                let shift = nn::dense(g, b, &format!("{p}.affine_shift"), w, 1.0)?;
                x = g.modulate(x, scale, shift)?;
                x = nn::lrelu(g, x);
                if let Some(n) = noise {
                    x = g.add_noise(x, n[site].clone(), b.var(&format!("{p}.noise_strength")))?;
                }
                site += 1;
            }
            if let Some(t) = taps.as_deref_mut() {
                t.push(x);
            }
        }
        nn::conv(g, b, &format!("synthesis.b{}.torgb", cfg.img_resolution), x, 1)
    }

    fn check_z(&self, z: &[T]) -> Result<()> {
        if z.len() != self.config.z_dim {
            return Err(Error::Shape(format!("z has {} entries, expected {}", z.len(), self.config.z_dim)));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("z has non-finite entries".into()));
        }
        Ok(())
    }

    /// Maps `z` to `w̄ + truncation·(f(z) − w̄)`; `truncation = 1` leaves `f(z)` unchanged.
    pub fn map_latent(&self, z: &[T], truncation: T) -> Result<LatentCode<T>> {
        self.check_z(z)?;
        if !(truncation >= T::zero() && truncation <= T::one()) {
            return Err(Error::InvalidArgument(format!("truncation {truncation} outside [0, 1]")));
        }
        let mut g = Graph::new();
        let b = self.params.bind_all(&mut g, false);
        let zv = g.constant(Tensor::new(&[1, z.len()], z.to_vec())?);
        let w = self.mapping_graph(&mut g, &b, zv)?;
        let raw = g.value(w).data();
        let values = if truncation == T::one() {
            raw.to_vec()
        } else {
            raw.iter().zip(&self.w_avg).map(|(&v, &m)| m + truncation * (v - m)).collect()
        };
        LatentCode::new(values, self.config.w_dim)
    }

    /// [`map_latent`](Self::map_latent) in statistics mode: folds the output into `w_avg`.
    pub fn map_latent_tracked(&mut self, z: &[T]) -> Result<LatentCode<T>> {
        let w = self.map_latent(z, T::one())?;
        self.w_avg_count += 1;
        let n = T::lit(self.w_avg_count as f64);
        for (m, &v) in self.w_avg.iter_mut().zip(&w.values) {
            *m = *m + (v - *m) / n;
        }
        Ok(w)
    }

    /// Re-estimates `w_avg` from `count` latent draws.
    pub fn estimate_w_avg(&mut self, seed: u64, count: usize) -> Result<()> {
        self.w_avg = vec![T::zero(); self.config.w_dim];
        self.w_avg_count = 0;
        for i in 0..count {
            let z = sample_z::<T>(seed, i as u64, self.config.z_dim);
            self.map_latent_tracked(&z)?;
        }
        Ok(())
    }

    pub fn w_avg_code(&self) -> LatentCode<T> {
        LatentCode { values: self.w_avg.clone() }
    }

    pub fn synthesize(&self, w: &LatentCode<T>, noise: Option<&NoiseRealization<T>>) -> Result<Tensor<T>> {
        let out = self.synthesize_batch(std::slice::from_ref(w), noise.map(std::slice::from_ref))?;
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    }

    /// Gradient-free synthesis of a batch; returns `[B, C, H, W]`.
    pub fn synthesize_batch(
        &self,
        ws: &[LatentCode<T>],
        noise: Option<&[NoiseRealization<T>]>,
    ) -> Result<Tensor<T>> {
        let (img, _) = self.synthesize_with_taps(ws, noise)?;
        Ok(img)
    }

    /// Synthesis plus the output of every resolution block.
    pub fn synthesize_with_taps(
        &self,
        ws: &[LatentCode<T>],
        noise: Option<&[NoiseRealization<T>]>,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        for w in ws {
            if w.dim() != self.config.w_dim {
                return Err(Error::Shape(format!("latent dim {} vs w_dim {}", w.dim(), self.config.w_dim)));
            }
        }
        let stacked = match noise {
            Some(n) if self.config.noise_mode != NoiseMode::Off => {
                if n.len() != ws.len() {
                    return Err(Error::Shape(format!("{} noise realizations for {} latents", n.len(), ws.len())));
                }
                Some(stack_noise(&n.iter().collect::<Vec<_>>())?)
            }
            _ => None,
        };
        let mut g = Graph::new();
        let b = self.params.bind_all(&mut g, false);
        let wv = g.constant(stack_latents(ws)?);
        let mut taps = Vec::new();
        let img = self.synthesis_graph(&mut g, &b, wv, stacked.as_deref(), Some(&mut taps))?;
        let taps = taps.into_iter().map(|v| g.value(v).clone()).collect();
        Ok((g.value(img).clone(), taps))
    }

    /// Noise for every frame of one video; a pure function of `video_seed`.
    pub fn sample_video_noise(&self, video_seed: u64) -> NoiseRealization<T> {
        sample_video_noise(&self.config, video_seed)
    }

    /// Noise used for frame `frame` of a video under the configured policy.
    pub fn frame_noise(&self, video_seed: u64, frame: u64) -> NoiseRealization<T> {
        match self.config.noise_mode {
            NoiseMode::Random => {
                sample_video_noise(&self.config, video_seed ^ (frame.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            }
            _ => sample_video_noise(&self.config, video_seed),
        }
    }

    /// Mapping parameters plus every synthesis tier at or below `max_resolution`.
    pub fn freeze_tier(&self, max_resolution: usize) -> Result<BTreeSet<String>> {
        if !max_resolution.is_power_of_two() || max_resolution < 4 {
            return Err(Error::InvalidArgument(format!("freeze resolution {max_resolution} is not a power of two >= 4")));
        }
        if max_resolution >= self.config.img_resolution {
            return Err(Error::InvalidArgument(format!(
                "freezing up to {max_resolution} leaves nothing trainable at output {}",
                self.config.img_resolution
            )));
        }
        let mut prefixes = vec!["mapping.".to_string()];
        prefixes.extend(
            self.config.resolutions().into_iter().filter(|&r| r <= max_resolution).map(|r| format!("synthesis.b{r}.")),
        );
        Ok(nn::names_with_prefixes(&self.params, &prefixes))
    }

    pub fn param_names(&self) -> BTreeSet<String> {
        self.params.names().map(str::to_owned).collect()
    }
}

pub fn sample_video_noise<T: Scalar>(config: &DecoderConfig, video_seed: u64) -> NoiseRealization<T> {
    let maps = config
        .noise_sites()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let v = rng::normal_vector(video_seed, Stream::SynthesisNoise, i as u64, r * r);
            Tensor::new(&[1, r, r], v.into_iter().map(T::lit).collect()).expect("square map")
        })
        .collect();
    NoiseRealization { maps }
}

/// Latent noise draw `index` for `seed`.
pub fn sample_z<T: Scalar>(seed: u64, index: u64, z_dim: usize) -> Vec<T> {
    rng::normal_vector(seed, Stream::Latent, index, z_dim).into_iter().map(T::lit).collect()
}
