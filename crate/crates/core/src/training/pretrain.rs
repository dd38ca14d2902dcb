//! Pretraining stages: the image GAN that produces the decoder, and the raw
//! inversion encoder `x ↦ E(x) + w̄`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mean_softplus, MetricsRow};
use crate::autograd::Graph;
use crate::data::SyntheticDataset;
use crate::decoder::{sample_z, stack_noise, LatentDecoder, NoiseMode, NoiseRealization};
use crate::discriminator::{r1_with_grads, Critic, ImageDiscriminator};
use crate::encoder::InversionEncoder;
use crate::error::{Error, Result};
use crate::nn::{merge_grads, Adam, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GanConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self { lr_g: 2e-3, lr_d: 2e-3, r1_gamma: 1.0, r1_interval: 16, batch: 8, seed: 0 }
    }
}

fn check_common(batch: usize, dataset: &SyntheticDataset, res: usize) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()));
    }
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    if dataset.resolution != res {
        return Err(Error::Config(format!("dataset resolution {} vs decoder {res}", dataset.resolution)));
    }
    Ok(())
}

/// Class-aware batch of real frames `[B, C, H, W]`.
fn real_frames<T: Scalar>(dataset: &SyntheticDataset, batch: usize, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let frames = (0..batch)
        .map(|_| {
            let (v, t) = dataset.sample_frame(rng)?;
            Ok(dataset.videos[v].render_frame(t)?.cast())
        })
        .collect::<Result<Vec<Tensor<T>>>>()?;
    Tensor::stack(&frames)
}

fn noise_batch<T: Scalar>(decoder: &LatentDecoder<T>, seeds: &[u64]) -> Result<Option<Vec<Tensor<T>>>> {
    if decoder.config.noise_mode == NoiseMode::Off {
        return Ok(None);
    }
    let n: Vec<NoiseRealization<T>> = seeds.iter().map(|&s| decoder.sample_video_noise(s)).collect();
    Ok(Some(stack_noise(&n.iter().collect::<Vec<_>>())?))
}

pub struct ImageGanTrainer<T: Scalar> {
    pub config: GanConfig,
    pub decoder: LatentDecoder<T>,
    pub critic: ImageDiscriminator,
    pub d_params: ParamStore<T>,
    pub dataset: SyntheticDataset,
    pub step: usize,
    pub log: Vec<MetricsRow>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> ImageGanTrainer<T> {
    pub fn new(
        config: GanConfig,
        decoder: LatentDecoder<T>,
        critic: ImageDiscriminator,
        d_params: ParamStore<T>,
        dataset: SyntheticDataset,
    ) -> Result<Self> {
        check_common(config.batch, &dataset, decoder.config.img_resolution)?;
        if config.r1_interval == 0 {
            return Err(Error::Config("r1_interval must be positive".into()));
        }
        let opt_g = Adam::new(config.lr_g, 0.0, 0.99);
        let opt_d = Adam::new(config.lr_d, 0.0, 0.99);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, decoder, critic, d_params, dataset, step: 0, log: Vec::new(), opt_g, opt_d, rng })
    }

    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let batch = self.config.batch;
        let seeds: Vec<u64> = (0..batch).map(|_| self.rng.random()).collect();
        let z: Vec<T> = seeds.iter().flat_map(|&s| sample_z::<T>(s, 0, self.decoder.config.z_dim)).collect();
        let noise = noise_batch(&self.decoder, &seeds)?;

        // Generator side.
        let mut g = Graph::new();
        let bg = self.decoder.params.bind_all(&mut g, true);
        let bd = self.d_params.bind_all(&mut g, false);
        let zv = g.constant(Tensor::new(&[batch, self.decoder.config.z_dim], z)?);
        let w = self.decoder.mapping_graph(&mut g, &bg, zv)?;
        let img = self.decoder.synthesis_graph(&mut g, &bg, w, noise.as_deref(), None)?;
        let logits = self.critic.logits_graph(&mut g, &bd, img, &[])?;
        let loss_g = mean_softplus(&mut g, logits, -1.0);
        let g_grads = bg.collect(&g.backward(loss_g)?);
        let fake = g.value(img).clone();
        let loss_g = g.value(loss_g).item();
        drop(g);

        // Critic side.
        let real = real_frames::<T>(&self.dataset, batch, &mut self.rng)?;
        let mut g = Graph::new();
        let bd = self.d_params.bind_all(&mut g, true);
        let xr = g.constant(real.clone());
        let xf = g.constant(fake);
        let lr = self.critic.logits_graph(&mut g, &bd, xr, &[])?;
        let lf = self.critic.logits_graph(&mut g, &bd, xf, &[])?;
        let a = mean_softplus(&mut g, lf, 1.0);
        let c = mean_softplus(&mut g, lr, -1.0);
        let loss_d = g.add(a, c)?;
        let mut d_grads = bd.collect(&g.backward(loss_d)?);
        let loss_d = g.value(loss_d).item();
        let mut values = vec![("loss_d", loss_d.re_f64()), ("loss_g", loss_g.re_f64())];
        if self.config.r1_gamma > 0.0 && self.step % self.config.r1_interval == 0 {
            let (v, rg) = r1_with_grads(&self.critic, &self.d_params, &real, &[], self.config.r1_gamma)?;
            merge_grads(&mut d_grads, rg, T::lit(self.config.r1_interval as f64));
            values.push(("r1", v.re_f64()));
        }
        if values.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite GAN loss at step {}", self.step)));
        }
        self.opt_d.step(&mut self.d_params, &d_grads)?;
        self.opt_g.step(&mut self.decoder.params, &g_grads)?;
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

    /// Re-estimates `w̄` and returns the trained decoder.
    pub fn finish(mut self, w_avg_samples: usize) -> Result<LatentDecoder<T>> {
        let seed = self.rng.random();
        self.decoder.estimate_w_avg(seed, w_avg_samples)?;
        Ok(self.decoder)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch: 8, seed: 0 }
    }
}

/// Minimises `mean ‖x − G(E(x) + w̄)‖²` over dataset frames with `G` frozen.
pub struct InversionTrainer<T: Scalar> {
    pub config: InversionConfig,
    pub decoder: LatentDecoder<T>,
    pub encoder: InversionEncoder<T>,
    pub dataset: SyntheticDataset,
    pub step: usize,
    pub log: Vec<MetricsRow>,
    opt: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> InversionTrainer<T> {
    pub fn new(
        config: InversionConfig,
        decoder: LatentDecoder<T>,
        encoder: InversionEncoder<T>,
        dataset: SyntheticDataset,
    ) -> Result<Self> {
        check_common(config.batch, &dataset, decoder.config.img_resolution)?;
        if encoder.encoder.config.w_dim != decoder.config.w_dim {
            return Err(Error::Config("encoder and decoder latent sizes differ".into()));
        }
        let opt = Adam::new(config.lr, 0.0, 0.99);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self { config, decoder, encoder, dataset, step: 0, log: Vec::new(), opt, rng })
    }

    /// Reconstruction loss on `frames: [B, C, H, W]` and, if asked, its gradient.
    pub fn loss(&self, frames: &Tensor<T>, noise_seeds: &[u64], grads: bool) -> Result<(T, crate::nn::GradMap<T>)> {
        let batch = frames.shape()[0];
        let noise = noise_batch(&self.decoder, noise_seeds)?;
        let mut g = Graph::new();
        let be = self.encoder.params.bind_all(&mut g, grads);
        let bdec = self.decoder.params.bind_all(&mut g, false);
        let x = g.constant(frames.clone());
        let r = self.encoder.encoder.forward_graph(&mut g, &be, x, None)?;
        let avg: Vec<T> = (0..batch).flat_map(|_| self.decoder.w_avg.iter().copied()).collect();
        let wbar = g.constant(Tensor::new(&[batch, self.decoder.config.w_dim], avg)?);
        let w = g.add(r, wbar)?;
        let img = self.decoder.synthesis_graph(&mut g, &bdec, w, noise.as_deref(), None)?;
        let diff = g.sub(img, x)?;
        let sq = g.sum_sq(diff);
        let loss = g.scale(sq, T::lit(1.0 / frames.numel() as f64));
        let gm = if grads { be.collect(&g.backward(loss)?) } else { Default::default() };
        Ok((g.value(loss).item(), gm))
    }

    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let frames = real_frames::<T>(&self.dataset, self.config.batch, &mut self.rng)?;
        let seeds: Vec<u64> = (0..self.config.batch).map(|_| self.rng.random()).collect();
        let (loss, grads) = self.loss(&frames, &seeds, true)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite inversion loss at step {}", self.step)));
        }
        self.opt.step(&mut self.encoder.params, &grads)?;
        let row = MetricsRow { step: self.step, values: vec![("recon", loss.re_f64())] };
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
