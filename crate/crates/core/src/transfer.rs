//! Fine-tuning-based style transfer.
//!
//! The child decoder is trained on a target image set with the mapping
//! network and every synthesis block up to `freeze_res` frozen, so latents
//! produced by the motion generator keep their meaning. Besides the
//! adversarial loss, child outputs are tied to parent outputs on shared
//! latents through the features of the raw inversion backbone: block
//! activations (perceptual term) and the final residual (identity term).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::checksum;
use crate::decoder::{sample_z, stack_latents, stack_noise, LatentCode, LatentDecoder, NoiseMode, NoiseRealization};
use crate::discriminator::{r1_with_grads, Critic, ImageDiscriminator};
use crate::encoder::InversionEncoder;
use crate::error::{Error, Result};
use crate::nn::{merge_grads, Adam, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{BitRepr, Tensor};
use crate::training::{mean_softplus, MetricsRow};

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    /// Largest synthesis resolution kept frozen.
    pub freeze_res: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub batch: usize,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub lambda_perceptual: f64,
    pub lambda_identity: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            freeze_res: 16,
            lr_g: 2e-3,
            lr_d: 2e-3,
            batch: 8,
            r1_gamma: 1.0,
            r1_interval: 16,
            lambda_perceptual: 1.0,
            lambda_identity: 1.0,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, img_resolution: usize) -> Result<()> {
        if !self.freeze_res.is_power_of_two() || self.freeze_res < 4 || self.freeze_res >= img_resolution {
            return Err(Error::Config(format!(
                "freeze_res {} must be a power of two in [4, {img_resolution})",
                self.freeze_res
            )));
        }
        if self.batch == 0 || self.r1_interval == 0 || !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("fine-tuning batch, interval and learning rates must be positive".into()));
        }
        if self.lambda_perceptual < 0.0 || self.lambda_identity < 0.0 || self.r1_gamma < 0.0 {
            return Err(Error::Config("fine-tuning loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fine-tunes a copy of `parent` toward `target` images.
pub struct StyleFinetuner<T: Scalar> {
    pub config: FinetuneConfig,
    pub parent: LatentDecoder<T>,
    pub child: LatentDecoder<T>,
    pub frozen: BTreeSet<String>,
    pub features: InversionEncoder<T>,
    pub critic: ImageDiscriminator,
    pub d_params: ParamStore<T>,
    pub target: Vec<Tensor<T>>,
    pub parent_checksum: String,
    pub step: usize,
    pub log: Vec<MetricsRow>,
    opt_g: Adam<T>,
    opt_d: Adam<T>,
    rng: ChaCha8Rng,
}

/// Mean squared difference of two graph values, gradient flowing into `a` only.
fn feature_mse<T: Scalar>(g: &mut Graph<T>, a: Var, b: &Tensor<T>) -> Result<Var> {
    let n = b.numel();
    let bv = g.constant(b.clone());
    let d = g.sub(a, bv)?;
    let s = g.sum_sq(d);
    Ok(g.scale(s, T::lit(1.0 / n as f64)))
}

impl<T: Scalar> StyleFinetuner<T> {
    pub fn new(
        config: FinetuneConfig,
        parent: LatentDecoder<T>,
        features: InversionEncoder<T>,
        critic: ImageDiscriminator,
        d_params: ParamStore<T>,
        target: Vec<Tensor<T>>,
    ) -> Result<Self> {
        let res = parent.config.img_resolution;
        config.validate(res)?;
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target image set".into()));
        }
        let want = [parent.config.img_channels, res, res];
        if let Some(bad) = target.iter().find(|t| t.shape() != want) {
            return Err(Error::Shape(format!("target image {:?} does not match decoder output {want:?}", bad.shape())));
        }
        if features.encoder.config.img_resolution != res {
            return Err(Error::Shape("feature encoder resolution differs from the decoder".into()));
        }
        let frozen = parent.freeze_tier(config.freeze_res)?;
        let parent_checksum = checksum(&parent.params);
        Ok(Self {
            opt_g: Adam::new(config.lr_g, 0.0, 0.99),
            opt_d: Adam::new(config.lr_d, 0.0, 0.99),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            child: parent.clone(),
            config,
            parent,
            frozen,
            features,
            critic,
            d_params,
            target,
            parent_checksum,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let batch = self.config.batch;
        let seeds: Vec<u64> = (0..batch).map(|_| self.rng.random()).collect();
        let ws = seeds
            .iter()
            .map(|&s| self.parent.map_latent(&sample_z::<T>(s, 0, self.parent.config.z_dim), T::one()))
            .collect::<Result<Vec<LatentCode<T>>>>()?;
        let reals: Option<Vec<NoiseRealization<T>>> = (self.parent.config.noise_mode != NoiseMode::Off)
            .then(|| seeds.iter().map(|&s| self.parent.sample_video_noise(s)).collect());
        let noise = reals.as_ref().map(|n| stack_noise(&n.iter().collect::<Vec<_>>())).transpose()?;
        let parent_img = self.parent.synthesize_batch(&ws, reals.as_deref())?;
        let (parent_taps, parent_id) = self.feature_targets(&parent_img)?;

        // Child side.
        let mut g = Graph::new();
        let frozen = &self.frozen;
        let bc = self.child.params.bind(&mut g, |n| !frozen.contains(n));
        let bf = self.features.params.bind_all(&mut g, false);
        let bd = self.d_params.bind_all(&mut g, false);
        let wv = g.constant(stack_latents(&ws)?);
        let img = self.child.synthesis_graph(&mut g, &bc, wv, noise.as_deref(), None)?;
        let logits = self.critic.logits_graph(&mut g, &bd, img, &[])?;
        let adv = mean_softplus(&mut g, logits, -1.0);
        let (perc, id) = self.feature_losses(&mut g, &bf, img, &parent_taps, &parent_id)?;
        let perc_w = g.scale(perc, T::lit(self.config.lambda_perceptual));
        let id_w = g.scale(id, T::lit(self.config.lambda_identity));
        let l = g.add(adv, perc_w)?;
        let loss = g.add(l, id_w)?;
        let g_grads = bc.collect(&g.backward(loss)?);
        let fake = g.value(img).clone();
        let vals = [g.value(adv).item(), g.value(perc).item(), g.value(id).item()].map(|v| v.re_f64());
        drop(g);

        // Critic side.
        let picks: Vec<Tensor<T>> =
            (0..batch).map(|_| self.target[self.rng.random_range(0..self.target.len())].clone()).collect();
        let real = Tensor::stack(&picks)?;
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
        let loss_d = g.value(loss_d).item().re_f64();
        let mut values = vec![("loss_d", loss_d), ("loss_g", vals[0]), ("perceptual", vals[1]), ("identity", vals[2])];
        if self.config.r1_gamma > 0.0 && self.step % self.config.r1_interval == 0 {
            let (v, rg) = r1_with_grads(&self.critic, &self.d_params, &real, &[], self.config.r1_gamma)?;
            merge_grads(&mut d_grads, rg, T::lit(self.config.r1_interval as f64));
            values.push(("r1", v.re_f64()));
        }
        if values.iter().any(|(_, v)| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite fine-tuning loss at step {}", self.step)));
        }
        self.opt_d.step(&mut self.d_params, &d_grads)?;
        self.opt_g.step(&mut self.child.params, &g_grads)?;
        let row = MetricsRow { step: self.step, values };
        self.step += 1;
        self.log.push(row.clone());
        Ok(row)
    }

    /// Backbone block activations and residuals of fixed images.
    fn feature_targets(&self, imgs: &Tensor<T>) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        let mut g = Graph::new();
        let b = self.features.params.bind_all(&mut g, false);
        let x = g.constant(imgs.clone());
        let mut taps = Vec::new();
        let r = self.features.encoder.forward_with_taps(&mut g, &b, x, None, Some(&mut taps))?;
        Ok((taps.iter().map(|&v| g.value(v).clone()).collect(), g.value(r).clone()))
    }

    fn feature_losses(
        &self,
        g: &mut Graph<T>,
        b: &Bound,
        img: Var,
        taps_ref: &[Tensor<T>],
        id_ref: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let mut taps = Vec::new();
        let r = self.features.encoder.forward_with_taps(g, b, img, None, Some(&mut taps))?;
        let mut perc = g.constant(Tensor::scalar(T::zero()));
        for (&v, t) in taps.iter().zip(taps_ref) {
            let m = feature_mse(g, v, t)?;
            perc = g.add(perc, m)?;
        }
        let perc = g.scale(perc, T::lit(1.0 / taps.len() as f64));
        let id = feature_mse(g, r, id_ref)?;
        Ok((perc, id))
    }

    pub fn train(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.train_step()?;
        }
        Ok(())
    }
}

impl<T: Scalar + BitRepr> StyleFinetuner<T> {
    /// Frozen tensors whose child value differs from the parent, bitwise.
    pub fn changed_frozen(&self) -> Vec<String> {
        self.frozen
            .iter()
            .filter(|n| !self.child.params.get(n).expect("frozen name").bit_eq(self.parent.params.get(n).expect("frozen name")))
            .cloned()
            .collect()
    }
}


/// Decodes a latent sequence with one noise realization shared by all frames.
pub fn transfer_video<T: Scalar>(
    decoder: &LatentDecoder<T>,
    latents: &[LatentCode<T>],
    noise: Option<&NoiseRealization<T>>,
) -> Result<Vec<Tensor<T>>> {
    const CHUNK: usize = 16;
    if let Some(w) = latents.iter().find(|w| w.dim() != decoder.config.w_dim) {
        return Err(Error::Shape(format!("latent dim {} vs decoder w_dim {}", w.dim(), decoder.config.w_dim)));
    }
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        let n: Option<Vec<NoiseRealization<T>>> = noise.map(|n| vec![n.clone(); chunk.len()]);
        let imgs = decoder.synthesize_batch(chunk, n.as_deref())?;
        out.extend(imgs.unstack());
    }
    Ok(out)
}
