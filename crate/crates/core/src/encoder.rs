//! Inversion encoders.
//!
//! The backbone is a stem conv followed by pre-activation residual blocks that
//! halve the resolution. Every block ends in a modulation site
//! `h ← (h + γ ⊙ IN(h) + β)/√2`; the raw inversion encoder uses `γ = 1, β = 0`
//! there, the modulated encoder takes `(γ, β)` from the temporal style head.
//! A global average pool and one fully connected layer give a residual latent.

use crate::ape::{AnchorTrack, ApeConfig, FfaApe, Query};
use crate::autograd::{Graph, Var};
use crate::decoder::{DecoderConfig, LatentCode, LatentDecoder, NoiseRealization};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::style::{StyleConfig, StyleHead, TemporalStyle};
use crate::tensor::Tensor;

pub const ADAIN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub img_resolution: usize,
    pub img_channels: usize,
    pub w_dim: usize,
    pub stem_channels: usize,
    /// Output channels of each residual block; each block halves the resolution.
    pub block_channels: Vec<usize>,
}

impl EncoderConfig {
    /// Four blocks (or fewer for small images) with widths following the decoder's schedule.
    pub fn for_decoder(dec: &DecoderConfig) -> Self {
        let blocks = (dec.img_resolution.trailing_zeros() as usize).saturating_sub(2).clamp(1, 4);
        let stem_channels = dec.channels(dec.img_resolution);
        let block_channels = (1..=blocks).map(|i| dec.channels(dec.img_resolution >> i)).collect();
        Self {
            img_resolution: dec.img_resolution,
            img_channels: dec.img_channels,
            w_dim: dec.w_dim,
            stem_channels,
            block_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() || self.img_resolution >> self.block_channels.len() == 0 {
            return Err(Error::Config(format!(
                "{} downsampling blocks do not fit a {}x{} input",
                self.block_channels.len(),
                self.img_resolution,
                self.img_resolution
            )));
        }
        if !self.img_resolution.is_power_of_two() {
            return Err(Error::Config(format!("encoder resolution {} is not a power of two", self.img_resolution)));
        }
        if self.stem_channels == 0 || self.block_channels.contains(&0) || self.w_dim == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn sites(&self) -> usize {
        self.config.block_channels.len()
    }

    /// The final projection starts at zero, so fresh encoders output a zero residual.
    pub fn add_params<T: Scalar>(&self, store: &mut ParamStore<T>, init: &mut Init) {
        let c = &self.config;
        nn::add_conv(store, init, "encoder.fromrgb", c.img_channels, c.stem_channels, 1, true);
        let mut cin = c.stem_channels;
        for (i, &cout) in c.block_channels.iter().enumerate() {
            nn::add_conv(store, init, &format!("encoder.b{i}.conv0"), cin, cin, 3, true);
            nn::add_conv(store, init, &format!("encoder.b{i}.conv1"), cin, cout, 3, true);
            if cin != cout {
                nn::add_conv(store, init, &format!("encoder.b{i}.skip"), cin, cout, 1, false);
            }
            cin = cout;
        }
        store.insert("encoder.out.weight", Tensor::zeros(&[c.w_dim, cin]));
        store.insert("encoder.out.bias", Tensor::zeros(&[c.w_dim]));
    }

    /// Names of the convolution tensors shared with the raw inversion encoder.
    pub fn is_conv_param(name: &str) -> bool {
        name.starts_with("encoder.") && !name.starts_with("encoder.out.")
    }

    /// `x: [B, C, H, W]` → residual `[B, w_dim]`. `mods[i] = (γ, β)`, each
    /// `[B, channels_i]`; `None` means `γ = 1, β = 0` at every site.
    pub fn forward_graph<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        mods: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        self.forward_with_taps(g, b, x, mods, None)
    }

    /// [`forward_graph`](Self::forward_graph), appending every block output to `taps`.
    pub fn forward_with_taps<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        x: Var,
        mods: Option<&[(Var, Var)]>,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let c = &self.config;
        let xs = g.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != c.img_channels || xs[2] != c.img_resolution || xs[3] != c.img_resolution {
            return Err(Error::Shape(format!(
                "encoder expects [B, {}, {}, {}], got {xs:?}",
                c.img_channels, c.img_resolution, c.img_resolution
            )));
        }
        if let Some(m) = mods {
            if m.len() != self.sites() {
                return Err(Error::Shape(format!("{} modulations for {} sites", m.len(), self.sites())));
            }
        }
        let batch = xs[0];
        let inv_sqrt2 = T::FRAC_1_SQRT_2();
        let mut h = nn::conv(g, b, "encoder.fromrgb", x, 1)?;
        let mut cin = c.stem_channels;
        for (i, &cout) in c.block_channels.iter().enumerate() {
            let p = format!("encoder.b{i}");
            let r = nn::lrelu(g, h);
            let r = nn::conv(g, b, &format!("{p}.conv0"), r, 1)?;
            let r = g.avg_pool2x(r)?;
            let r = nn::lrelu(g, r);
            let r = nn::conv(g, b, &format!("{p}.conv1"), r, 1)?;
            let sc = if cin != cout { nn::conv(g, b, &format!("{p}.skip"), h, 1)? } else { h };
            let sc = g.avg_pool2x(sc)?;
            let sum = g.add(sc, r)?;
            h = g.scale(sum, inv_sqrt2);

            let (gamma, beta) = match mods {
                Some(m) => m[i],
                None => (g.constant(Tensor::full(&[batch, cout], T::one())), g.constant(Tensor::zeros(&[batch, cout]))),
            };
            let n = g.instance_norm(h, T::lit(ADAIN_EPS))?;
            let m = g.modulate(n, gamma, beta)?;
            let sum = g.add(h, m)?;
            h = g.scale(sum, inv_sqrt2);
            if let Some(t) = taps.as_deref_mut() {
                t.push(h);
            }
            cin = cout;
        }
        let h = nn::lrelu(g, h);
        let pooled = g.global_avg_pool(h)?;
        nn::dense(g, b, "encoder.out", pooled, 1.0)
    }
}

fn frame_batch<T: Scalar>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = frames.iter().map(|f| (*f).clone()).collect();
    Tensor::stack(&items)
}

/// Raw inversion encoder: `x ↦ E(x) + w̄`.
#[derive(Clone, Debug)]
pub struct InversionEncoder<T: Scalar> {
    pub encoder: Encoder,
    pub params: ParamStore<T>,
}

impl<T: Scalar> InversionEncoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        let encoder = Encoder::new(config)?;
        let mut params = ParamStore::new();
        encoder.add_params(&mut params, &mut Init::new(seed));
        Ok(Self { encoder, params })
    }

    /// Residuals for a batch of `[C, H, W]` frames.
    pub fn residuals(&self, frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let b = self.params.bind_all(&mut g, false);
        let x = g.constant(frame_batch(frames)?);
        let r = self.encoder.forward_graph(&mut g, &b, x, None)?;
        Ok(g.value(r).clone())
    }

    /// Latent whose rendering should reconstruct `frame`.
    pub fn invert(&self, decoder: &LatentDecoder<T>, frame: &Tensor<T>) -> Result<LatentCode<T>> {
        let r = self.residuals(&[frame])?;
        let values = r.data().iter().zip(&decoder.w_avg).map(|(&a, &m)| a + m).collect();
        LatentCode::new(values, decoder.config.w_dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleInvConfig {
    pub ape: ApeConfig,
    pub style_dim: usize,
    pub encoder: EncoderConfig,
    /// Render `G(w0)` for the encoder with the video's noise (otherwise with zero noise).
    pub first_frame_noise: bool,
}

impl StyleInvConfig {
    pub fn for_decoder(dec: &DecoderConfig) -> Self {
        Self {
            ape: ApeConfig { code_dim: dec.w_dim, ..ApeConfig::default() },
            style_dim: dec.w_dim,
            encoder: EncoderConfig::for_decoder(dec),
            first_frame_noise: true,
        }
    }
}

/// The motion generator: positional encoding, style head and modulated
/// encoder, with all trainable tensors in one store.
#[derive(Clone, Debug)]
pub struct StyleInv<T: Scalar> {
    pub config: StyleInvConfig,
    pub ape: FfaApe,
    pub head: StyleHead,
    pub encoder: Encoder,
    pub params: ParamStore<T>,
}

/// Output of [`StyleInv::latents_graph`].
pub struct LatentVars {
    /// `w0 + residual`, `[Q, w_dim]`.
    pub latents: Var,
    /// Encoder output, `[Q, w_dim]`.
    pub residuals: Var,
}

impl<T: Scalar> StyleInv<T> {
    pub fn new(config: StyleInvConfig, seed: u64) -> Result<Self> {
        let ape = FfaApe::new(config.ape.clone())?;
        let encoder = Encoder::new(config.encoder.clone())?;
        let head = StyleHead::new(StyleConfig {
            code_dim: config.ape.code_dim,
            w_dim: config.encoder.w_dim,
            style_dim: config.style_dim,
            site_channels: config.encoder.block_channels.clone(),
        })?;
        let mut params = ParamStore::new();
        let mut init = Init::new(seed);
        ape.add_params(&mut params, &mut init);
        head.add_params(&mut params, &mut init);
        encoder.add_params(&mut params, &mut init);
        Ok(Self { config, ape, head, encoder, params })
    }

    pub fn cast<U: Scalar>(&self) -> StyleInv<U> {
        StyleInv {
            config: self.config.clone(),
            ape: self.ape.clone(),
            head: self.head.clone(),
            encoder: self.encoder.clone(),
            params: self.params.cast(),
        }
    }

    /// Residual for `frames: [Q, C, H, W]` under styles `s: [Q, style_dim]`.
    pub fn residual_graph(&self, g: &mut Graph<T>, b: &Bound, frames: Var, s: Var) -> Result<Var> {
        let mods = (0..self.encoder.sites())
            .map(|i| self.head.site_graph(g, b, s, i))
            .collect::<Result<Vec<_>>>()?;
        self.encoder.forward_graph(g, b, frames, Some(&mods))
    }

    /// Latents `w0 + E(G(w0), s_t)` for every query. `first_frames: [B, C, H, W]`
    /// and `w0: [B, w_dim]` are indexed by the query's track.
    pub fn latents_graph(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        first_frames: Var,
        w0: Var,
        tracks: &[AnchorTrack],
        queries: &[Query],
    ) -> Result<LatentVars> {
        if g.shape(first_frames)[0] != tracks.len() || g.shape(w0)[0] != tracks.len() {
            return Err(Error::Shape(format!(
                "{} tracks for {} frames and {} latents",
                tracks.len(),
                g.shape(first_frames)[0],
                g.shape(w0)[0]
            )));
        }
        let picks: Vec<(usize, usize)> = queries.iter().map(|q| (0, q.track)).collect();
        let frames_q = g.gather_rows(&[first_frames], &picks)?;
        let w0_q = g.gather_rows(&[w0], &picks)?;
        let v = self.ape.encode_graph(g, b, tracks, queries)?;
        let s = self.head.fuse_graph(g, b, v, w0_q)?;
        let residuals = self.residual_graph(g, b, frames_q, s)?;
        let latents = g.add(w0_q, residuals)?;
        Ok(LatentVars { latents, residuals })
    }

    /// Noise used to render the encoder's input frame.
    pub fn first_frame_noise(&self, decoder: &LatentDecoder<T>, noise: Option<&NoiseRealization<T>>) -> Option<NoiseRealization<T>> {
        let n = noise.cloned().unwrap_or_else(|| decoder.sample_video_noise(0));
        if self.config.first_frame_noise {
            Some(n)
        } else {
            Some(NoiseRealization { maps: n.maps.iter().map(|m| Tensor::zeros(m.shape())).collect() })
        }
    }

    /// Residual of a single frame under a given temporal style.
    pub fn encode_frame(&self, frame: &Tensor<T>, s: &TemporalStyle<T>) -> Result<LatentCode<T>> {
        let mut g = Graph::new();
        let b = self.params.bind_all(&mut g, false);
        let x = g.constant(frame_batch(&[frame])?);
        let sv = g.constant(Tensor::new(&[1, s.values.len()], s.values.clone())?);
        let r = self.residual_graph(&mut g, &b, x, sv)?;
        LatentCode::new(g.value(r).data().to_vec(), self.config.encoder.w_dim)
    }

    /// Latents of one video at the given timestamps.
    pub fn trajectory(
        &self,
        decoder: &LatentDecoder<T>,
        w0: &LatentCode<T>,
        track: &AnchorTrack,
        noise: Option<&NoiseRealization<T>>,
        ts: &[f64],
    ) -> Result<Vec<LatentCode<T>>> {
        let first = decoder.synthesize(w0, self.first_frame_noise(decoder, noise).as_ref())?;
        self.trajectory_from_frame(&first, w0, track, ts)
    }

    /// [`trajectory`](Self::trajectory) with the rendered first frame supplied.
    pub fn trajectory_from_frame(
        &self,
        first: &Tensor<T>,
        w0: &LatentCode<T>,
        track: &AnchorTrack,
        ts: &[f64],
    ) -> Result<Vec<LatentCode<T>>> {
        let mut out = Vec::with_capacity(ts.len());
        let mut g = Graph::new();
        let b = self.params.bind_all(&mut g, false);
        let f = g.constant(frame_batch(&[first])?);
        let w = g.constant(w0.to_tensor());
        let mark = g.len();
        for chunk in ts.chunks(TRAJECTORY_CHUNK) {
            g.truncate(mark);
            let qs: Vec<Query> = chunk.iter().map(|&t| Query { track: 0, t }).collect();
            let lv = self.latents_graph(&mut g, &b, f, w, std::slice::from_ref(track), &qs)?;
            let vals = g.value(lv.latents);
            for r in 0..chunk.len() {
                out.push(LatentCode::new(vals.row(r).to_vec(), w0.dim())?);
            }
        }
        Ok(out)
    }

    pub fn styleinv(
        &self,
        decoder: &LatentDecoder<T>,
        w0: &LatentCode<T>,
        t: f64,
        track: &AnchorTrack,
        noise: Option<&NoiseRealization<T>>,
    ) -> Result<LatentCode<T>> {
        Ok(self.trajectory(decoder, w0, track, noise, &[t])?.remove(0))
    }

    /// Copies every convolution tensor from a raw inversion encoder. The
    /// positional encoding, style head and final projection keep their values.
    pub fn init_from_inversion(&mut self, source: &InversionEncoder<T>) -> Result<()> {
        let mut bad = Vec::new();
        let names: Vec<String> = self.params.names().filter(|n| Encoder::is_conv_param(n)).map(str::to_owned).collect();
        for name in &names {
            match source.params.get(name) {
                Some(t) if t.shape() == self.params.get(name).expect("listed").shape() => {}
                Some(t) => bad.push(format!("{name}: {:?} vs {:?}", t.shape(), self.params.get(name).unwrap().shape())),
                None => bad.push(format!("{name}: missing")),
            }
        }
        if !bad.is_empty() {
            return Err(Error::Checkpoint(format!("inversion encoder mismatch: {}", bad.join(", "))));
        }
        for name in &names {
            self.params.insert(name.clone(), source.params.get(name).expect("checked").clone());
        }
        Ok(())
    }
}

/// Timestamps encoded per graph when computing long trajectories.
pub const TRAJECTORY_CHUNK: usize = 64;
