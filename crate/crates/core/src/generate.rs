//! Video generation from a trained motion generator and a frozen decoder.
//!
//! Frame `k` of a video is `G(styleinv(w0, k / M))` for frame-rate
//! multiplier `M`. Every frame depends only on `(seed, k / M)`, so videos can
//! be extended to any length or sampled at any single timestamp.

use crate::ape::AnchorTrack;
use crate::decoder::{sample_z, LatentCode, LatentDecoder, NoiseMode, NoiseRealization};
use crate::encoder::{InversionEncoder, StyleInv};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transfer::transfer_video;

#[derive(Clone, Debug)]
pub struct GenerateRequest<T> {
    pub seed: u64,
    pub frames: usize,
    pub fps_multiplier: usize,
    pub truncation: f64,
    /// Image whose inversion replaces the sampled first latent.
    pub init_image: Option<Tensor<T>>,
}

impl<T> GenerateRequest<T> {
    pub fn new(seed: u64, frames: usize) -> Self {
        Self { seed, frames, fps_multiplier: 1, truncation: 1.0, init_image: None }
    }

    /// Timestamps `0, 1/M, …, (N·M − 1)/M`.
    pub fn timestamps(&self) -> Vec<f64> {
        let m = self.fps_multiplier as f64;
        (0..self.frames * self.fps_multiplier).map(|k| k as f64 / m).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedVideo<T> {
    pub w0: LatentCode<T>,
    pub timestamps: Vec<f64>,
    pub latents: Vec<LatentCode<T>>,
    pub frames: Vec<Tensor<T>>,
}

pub struct VideoGenerator<'a, T: Scalar> {
    pub decoder: &'a LatentDecoder<T>,
    pub model: &'a StyleInv<T>,
    pub inversion: Option<&'a InversionEncoder<T>>,
}

impl<'a, T: Scalar> VideoGenerator<'a, T> {
    pub fn new(decoder: &'a LatentDecoder<T>, model: &'a StyleInv<T>) -> Self {
        Self { decoder, model, inversion: None }
    }

    pub fn with_inversion(mut self, inversion: &'a InversionEncoder<T>) -> Self {
        self.inversion = Some(inversion);
        self
    }

    pub fn first_latent(&self, req: &GenerateRequest<T>) -> Result<LatentCode<T>> {
        match &req.init_image {
            Some(img) => {
                let inv = self
                    .inversion
                    .ok_or_else(|| Error::InvalidArgument("an initial image needs the inversion encoder".into()))?;
                inv.invert(self.decoder, img)
            }
            None => {
                let z = sample_z::<T>(req.seed, 0, self.decoder.config.z_dim);
                self.decoder.map_latent(&z, T::lit(req.truncation))
            }
        }
    }

    pub fn video_noise(&self, seed: u64) -> Option<NoiseRealization<T>> {
        (self.decoder.config.noise_mode != NoiseMode::Off).then(|| self.decoder.sample_video_noise(seed))
    }

    /// Latents at arbitrary timestamps of the video drawn from `req`.
    pub fn latents_at(&self, req: &GenerateRequest<T>, ts: &[f64]) -> Result<(LatentCode<T>, Vec<LatentCode<T>>)> {
        let w0 = self.first_latent(req)?;
        let noise = self.video_noise(req.seed);
        let latents = self.model.trajectory(self.decoder, &w0, &AnchorTrack::new(req.seed), noise.as_ref(), ts)?;
        Ok((w0, latents))
    }

    /// Renders latents that sit at output frame indices `indices`.
    pub fn render(&self, seed: u64, latents: &[LatentCode<T>], indices: &[u64]) -> Result<Vec<Tensor<T>>> {
        if latents.len() != indices.len() {
            return Err(Error::InvalidArgument(format!("{} latents for {} frame indices", latents.len(), indices.len())));
        }
        match self.decoder.config.noise_mode {
            NoiseMode::Random => latents
                .iter()
                .zip(indices)
                .map(|(w, &k)| self.decoder.synthesize(w, Some(&self.decoder.frame_noise(seed, k))))
                .collect(),
            _ => transfer_video(self.decoder, latents, self.video_noise(seed).as_ref()),
        }
    }

    pub fn generate(&self, req: &GenerateRequest<T>) -> Result<GeneratedVideo<T>> {
        if req.frames == 0 || req.fps_multiplier == 0 {
            return Err(Error::InvalidArgument("frames and fps multiplier must be positive".into()));
        }
        let timestamps = req.timestamps();
        let (w0, latents) = self.latents_at(req, &timestamps)?;
        let indices: Vec<u64> = (0..latents.len() as u64).collect();
        let frames = self.render(req.seed, &latents, &indices)?;
        Ok(GeneratedVideo { w0, timestamps, latents, frames })
    }

    /// Output frame `k` alone.
    pub fn frame_at(&self, req: &GenerateRequest<T>, k: usize) -> Result<Tensor<T>> {
        let t = k as f64 / req.fps_multiplier.max(1) as f64;
        let (_, latents) = self.latents_at(req, &[t])?;
        Ok(self.render(req.seed, &latents, &[k as u64])?.remove(0))
    }
}
