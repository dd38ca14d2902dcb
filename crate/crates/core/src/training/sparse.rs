//! First-frame-aware sparse training of the motion generator against a
//! time-gap-conditioned video critic. The decoder stays frozen.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mean_softplus, sample_timestamps, Ablation, AdaState, Augment, MetricsRow, TrainConfig};
use crate::ape::{AnchorTrack, ApeVariant, Query};
use crate::autograd::{Graph, Var};
use crate::data::{ClipSample, SyntheticDataset};
use crate::decoder::{sample_z, stack_latents, stack_noise, LatentCode, LatentDecoder, NoiseMode, NoiseRealization};
use crate::discriminator::{r1_with_grads, Critic, VideoDiscriminator};
use crate::encoder::StyleInv;
use crate::error::{Error, Result};
use crate::nn::{merge_grads, Adam, Bound, GradMap, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A generated training clip before rendering.
#[derive(Clone, Debug)]
pub struct FakeClip<T> {
    pub video_seed: u64,
    pub w0: LatentCode<T>,
    pub track: AnchorTrack,
    pub noise: Option<NoiseRealization<T>>,
    pub timestamps: [usize; 4],
}

/// Graph handles of a batch of generated clips.
pub struct FakeVars {
    /// Critic input, `[B·critic_frames, C, H, W]`.
    pub critic_frames: Var,
    /// `G(w0)` rendered with the video's noise, `[B, C, H, W]`.
    pub first: Var,
    /// `G(styleinv(w0, t))` for all four timestamps of every clip, `[4B, C, H, W]`.
    pub rendered: Var,
    pub latents: Var,
    pub residuals: Var,
}

pub struct SparseTrainer<T: Scalar> {
    pub config: TrainConfig,
    pub decoder: LatentDecoder<T>,
    pub model: StyleInv<T>,
    pub critic: VideoDiscriminator,
    pub d_params: ParamStore<T>,
    pub dataset: SyntheticDataset,
    pub ada: AdaState,
    pub step: usize,
    pub log: Vec<MetricsRow>,
    opt_e: Adam<T>,
    opt_d: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> SparseTrainer<T> {
    pub fn new(
        config: TrainConfig,
        decoder: LatentDecoder<T>,
        model: StyleInv<T>,
        critic: VideoDiscriminator,
        d_params: ParamStore<T>,
        dataset: SyntheticDataset,
    ) -> Result<Self> {
        config.validate()?;
        let want_ape = if config.ablation == Ablation::NoApe { ApeVariant::Acyclic } else { ApeVariant::FirstFrameAware };
        if model.config.ape.variant != want_ape {
            return Err(Error::Config(format!("ablation {} needs the {want_ape:?} encoding", config.ablation)));
        }
        if critic.frames() != config.ablation.critic_frames() {
            return Err(Error::Config(format!(
                "ablation {} needs a {}-frame critic, got {}",
                config.ablation,
                config.ablation.critic_frames(),
                critic.frames()
            )));
        }
        if dataset.resolution != decoder.config.img_resolution {
            return Err(Error::Config(format!(
                "dataset resolution {} vs decoder {}",
                dataset.resolution, decoder.config.img_resolution
            )));
        }
        let opt_e = Adam::new(config.lr_encoder, 0.0, 0.99);
        let opt_d = Adam::new(config.lr_d, 0.0, 0.99);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            decoder,
            model,
            critic,
            d_params,
            dataset,
            ada: AdaState::default(),
            step: 0,
            log: Vec::new(),
            opt_e,
            opt_d,
            rng,
        })
    }

    pub fn sample_fake(&mut self) -> Result<FakeClip<T>> {
        let video_seed: u64 = self.rng.random();
        let z = sample_z::<T>(video_seed, 0, self.decoder.config.z_dim);
        let w0 = self.decoder.map_latent(&z, T::lit(self.config.truncation))?;
        let noise = (self.decoder.config.noise_mode != NoiseMode::Off).then(|| self.decoder.sample_video_noise(video_seed));
        let timestamps = sample_timestamps(self.config.max_t, &mut self.rng)?;
        Ok(FakeClip { video_seed, w0, track: AnchorTrack::new(video_seed), noise, timestamps })
    }

    pub fn sample_real(&mut self) -> Result<ClipSample> {
        self.dataset.sample_clip(&mut self.rng, self.config.max_t)
    }

    fn frame_noise(&self, clip: &FakeClip<T>, t: usize) -> Option<NoiseRealization<T>> {
        match self.decoder.config.noise_mode {
            NoiseMode::Off => None,
            NoiseMode::ConstantPerVideo => clip.noise.clone(),
            NoiseMode::Random => Some(self.decoder.frame_noise(clip.video_seed, t as u64)),
        }
    }

    /// Critic gaps of a clip under the current ablation.
    pub fn critic_deltas(&self, timestamps: &[usize; 4]) -> Vec<f64> {
        let first = 4 - self.critic.frames();
        (first..3).map(|i| (timestamps[i + 1] - timestamps[i]) as f64).collect()
    }

    /// Real critic input `[B·frames, C, H, W]` and gaps.
    pub fn real_batch(&self, clips: &[ClipSample]) -> Result<(Tensor<T>, Vec<f64>)> {
        let first = 4 - self.critic.frames();
        let frames: Vec<Tensor<T>> = clips.iter().flat_map(|c| c.frames[first..].iter().map(|f| f.cast())).collect();
        let deltas = clips.iter().flat_map(|c| self.critic_deltas(&c.timestamps)).collect();
        Ok((Tensor::stack(&frames)?, deltas))
    }

    pub fn fake_deltas(&self, clips: &[FakeClip<T>]) -> Vec<f64> {
        clips.iter().flat_map(|c| self.critic_deltas(&c.timestamps)).collect()
    }

    /// Renders a batch of clips in `g`. The first critic slot of every clip is
    /// `G(w0)`, never the encoder's reconstruction of it.
    pub fn fake_graph(&self, g: &mut Graph<T>, b_model: &Bound, b_dec: &Bound, clips: &[FakeClip<T>]) -> Result<FakeVars> {
        let ws: Vec<LatentCode<T>> = clips.iter().map(|c| c.w0.clone()).collect();
        let noise0: Option<Vec<NoiseRealization<T>>> = clips.iter().map(|c| self.frame_noise(c, 0)).collect();
        let first_t = self.decoder.synthesize_batch(&ws, noise0.as_deref())?;
        let enc_in = if self.model.config.first_frame_noise || noise0.is_none() {
            None
        } else {
            let zeros: Vec<NoiseRealization<T>> = noise0
                .iter()
                .flatten()
                .map(|n| NoiseRealization { maps: n.maps.iter().map(|m| Tensor::zeros(m.shape())).collect() })
                .collect();
            Some(self.decoder.synthesize_batch(&ws, Some(&zeros))?)
        };
        let first = g.constant(first_t);
        let enc = match enc_in {
            Some(t) => g.constant(t),
            None => first,
        };
        let w0 = g.constant(stack_latents(&ws)?);
        let tracks: Vec<AnchorTrack> = clips.iter().map(|c| c.track.clone()).collect();
        let queries: Vec<Query> = clips
            .iter()
            .enumerate()
            .flat_map(|(b, c)| c.timestamps.iter().map(move |&t| Query { track: b, t: t as f64 }))
            .collect();
        let lv = self.model.latents_graph(g, b_model, enc, w0, &tracks, &queries)?;
        let noise_rows: Option<Vec<NoiseRealization<T>>> = clips
            .iter()
            .flat_map(|c| c.timestamps.iter().map(move |&t| (c, t)))
            .map(|(c, t)| self.frame_noise(c, t))
            .collect();
        let stacked = match &noise_rows {
            Some(rows) => Some(stack_noise(&rows.iter().collect::<Vec<_>>())?),
            None => None,
        };
        let rendered = self.decoder.synthesis_graph(g, b_dec, lv.latents, stacked.as_deref(), None)?;
        let frames = self.critic.frames();
        let picks: Vec<(usize, usize)> = (0..clips.len())
            .flat_map(|b| {
                let lead = (frames == 4).then_some((0, b));
                lead.into_iter().chain((1..4).map(move |i| (1, 4 * b + i)))
            })
            .collect();
        let critic_frames = g.gather_rows(&[first, rendered], &picks)?;
        Ok(FakeVars { critic_frames, first, rendered, latents: lv.latents, residuals: lv.residuals })
    }

    fn draw_augs(&mut self, n: usize) -> Vec<Augment> {
        let p = if self.config.ada_enabled { self.ada.p } else { 0.0 };
        let res = self.decoder.config.img_resolution;
        (0..n).map(|_| Augment::sample(p, res, &mut self.rng)).collect()
    }

    /// Critic loss `mean softplus(D(fake)) + mean softplus(−D(real))` and its
    /// gradient. Inputs are already augmented. Returns `(loss, grads, real logits)`.
    pub fn critic_loss(
        &self,
        real: &Tensor<T>,
        real_deltas: &[f64],
        fake: &Tensor<T>,
        fake_deltas: &[f64],
    ) -> Result<(T, GradMap<T>, Vec<T>)> {
        let mut g = Graph::new();
        let b = self.d_params.bind_all(&mut g, true);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake.clone());
        let lr = self.critic.logits_graph(&mut g, &b, xr, real_deltas)?;
        let lf = self.critic.logits_graph(&mut g, &b, xf, fake_deltas)?;
        let a = mean_softplus(&mut g, lf, 1.0);
        let c = mean_softplus(&mut g, lr, -1.0);
        let loss = g.add(a, c)?;
        let grads = b.collect(&g.backward(loss)?);
        Ok((g.value(loss).item(), grads, g.value(lr).data().to_vec()))
    }

    /// One critic update on a fixed batch; returns the loss before the update.
    pub fn critic_step(
        &mut self,
        real: &Tensor<T>,
        real_deltas: &[f64],
        fake: &Tensor<T>,
        fake_deltas: &[f64],
    ) -> Result<(T, Option<T>, Vec<T>)> {
        let (loss, mut grads, real_logits) = self.critic_loss(real, real_deltas, fake, fake_deltas)?;
        let mut r1 = None;
        if self.config.r1_gamma > 0.0 && self.step % self.config.r1_interval == 0 {
            let (v, rg) = r1_with_grads(&self.critic, &self.d_params, real, real_deltas, self.config.r1_gamma)?;
            merge_grads(&mut grads, rg, T::lit(self.config.r1_interval as f64));
            r1 = Some(v);
        }
        self.opt_d.step(&mut self.d_params, &grads)?;
        Ok((loss, r1, real_logits))
    }

    /// Encoder-side objective on a batch of clips. Returns the gradient map,
    /// `(loss_e, loss_g, recon, reg)` and the unaugmented critic input.
    pub fn encoder_objective(&mut self, clips: &[FakeClip<T>]) -> Result<(GradMap<T>, [f64; 4], Tensor<T>)> {
        let augs = self.draw_augs(clips.len());
        let mut g = Graph::new();
        let bm = self.model.params.bind_all(&mut g, true);
        let bdec = self.decoder.params.bind_all(&mut g, false);
        let bd = self.d_params.bind_all(&mut g, false);
        let fv = self.fake_graph(&mut g, &bm, &bdec, clips)?;
        let x = super::augment_graph(&mut g, fv.critic_frames, &augs, self.critic.frames())?;
        let logits = self.critic.logits_graph(&mut g, &bd, x, &self.fake_deltas(clips))?;
        let loss_g = mean_softplus(&mut g, logits, -1.0);

        let starts: Vec<(usize, usize)> = (0..clips.len()).map(|b| (0, 4 * b)).collect();
        let y0 = g.gather_rows(&[fv.rendered], &starts)?;
        let diff = g.sub(y0, fv.first)?;
        let sq = g.sum_sq(diff);
        let numel = g.value(diff).numel() as f64;
        let recon = g.scale(sq, T::lit(1.0 / numel));
        let rsq = g.sum_sq(fv.residuals);
        let reg = g.scale(rsq, T::lit(1.0 / clips.len() as f64));

        let l2 = self.config.effective_lambda_l2();
        let mut loss = loss_g;
        if l2 > 0.0 {
            let t = g.scale(recon, T::lit(l2));
            loss = g.add(loss, t)?;
        }
        if self.config.lambda_reg > 0.0 {
            let t = g.scale(reg, T::lit(self.config.lambda_reg));
            loss = g.add(loss, t)?;
        }
        let grads = bm.collect(&g.backward(loss)?);
        let stats = [loss, loss_g, recon, reg].map(|v| g.value(v).item().re_f64());
        Ok((grads, stats, g.value(fv.critic_frames).clone()))
    }

    /// An encoder-side update alone; the critic is not touched.
    pub fn encoder_step(&mut self, clips: &[FakeClip<T>]) -> Result<[f64; 4]> {
        let (grads, stats, _) = self.encoder_objective(clips)?;
        self.opt_e.step(&mut self.model.params, &grads)?;
        Ok(stats)
    }

    /// One simultaneous update of the encoder side and the critic.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let batch = self.config.batch;
        let reals = (0..batch).map(|_| self.sample_real()).collect::<Result<Vec<_>>>()?;
        let fakes = (0..batch).map(|_| self.sample_fake()).collect::<Result<Vec<_>>>()?;

        let (e_grads, [loss_e, loss_g, recon, reg], fake_x) = self.encoder_objective(&fakes)?;

        let (real_x, real_d) = self.real_batch(&reals)?;
        let frames = self.critic.frames();
        let real_augs = self.draw_augs(batch);
        let fake_augs = self.draw_augs(batch);
        let real_x = super::augment_tensor(&real_x, &real_augs, frames)?;
        let fake_x = super::augment_tensor(&fake_x, &fake_augs, frames)?;
        let fake_d = self.fake_deltas(&fakes);
        let (loss_d, r1, real_logits) = self.critic_step(&real_x, &real_d, &fake_x, &fake_d)?;

        self.opt_e.step(&mut self.model.params, &e_grads)?;

        self.ada.observe(&real_logits);
        let mut sign = f64::NAN;
        if self.config.ada_enabled && (self.step + 1) % self.config.ada_interval == 0 {
            sign = self.ada.update(self.config.ada_target, self.config.ada_speed).unwrap_or(f64::NAN);
        }
        let mut values = vec![
            ("loss_d", loss_d.re_f64()),
            ("loss_g", loss_g),
            ("recon", recon),
            ("reg", reg),
            ("loss_e", loss_e),
            ("ada_p", self.ada.p),
        ];
        if let Some(r) = r1 {
            values.push(("r1", r.re_f64()));
        }
        if sign.is_finite() {
            values.push(("real_sign", sign));
        }
        for (k, v) in &values {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("{k} is {v} at step {}", self.step)));
            }
        }
        let row = MetricsRow { step: self.step, values };
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    pub fn train(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.train_step()?;
        }
        Ok(())
    }
}
