//! Training: sparse timestamp sampling, loss assembly, adaptive augmentation,
//! the first-frame-aware sparse trainer and the two pretraining stages.

mod augment;
mod pretrain;
mod sparse;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use augment::{ada_controller, augment_graph, augment_tensor, AdaState, Augment};
pub use pretrain::{GanConfig, ImageGanTrainer, InversionConfig, InversionTrainer};
pub use sparse::{FakeClip, FakeVars, SparseTrainer};

/// Three distinct integers from `[1, max_t]`, sorted, preceded by 0.
pub fn sample_timestamps(max_t: usize, rng: &mut impl Rng) -> Result<[usize; 4]> {
    if max_t < 3 {
        return Err(Error::InvalidArgument(format!("max_t must be >= 3, got {max_t}")));
    }
    let mut picks: Vec<usize> = rand::seq::index::sample(rng, max_t, 3).into_iter().map(|i| i + 1).collect();
    picks.sort_unstable();
    Ok([0, picks[0], picks[1], picks[2]])
}

/// Which parts of the method are disabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// No first-frame reconstruction loss and no first frame in the critic.
    NoReconNoFirstFrame,
    /// No first frame in the critic.
    NoFirstFrame,
    /// Acyclic positional encoding without the constant first anchor.
    NoApe,
}

impl Ablation {
    pub fn critic_frames(self) -> usize {
        match self {
            Ablation::NoReconNoFirstFrame | Ablation::NoFirstFrame => 3,
            _ => 4,
        }
    }

    pub fn uses_recon(self) -> bool {
        self != Ablation::NoReconNoFirstFrame
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoReconNoFirstFrame => "no_recon_no_first_frame",
            Ablation::NoFirstFrame => "no_first_frame",
            Ablation::NoApe => "no_ape",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_recon_no_first_frame" => Ok(Ablation::NoReconNoFirstFrame),
            "no_first_frame" => Ok(Ablation::NoFirstFrame),
            "no_ape" => Ok(Ablation::NoApe),
            other => Err(Error::Config(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda_l2: f64,
    pub lambda_reg: f64,
    pub lr_encoder: f64,
    pub lr_d: f64,
    pub r1_gamma: f64,
    pub r1_interval: usize,
    pub batch: usize,
    pub steps: usize,
    pub max_t: usize,
    pub ada_enabled: bool,
    pub ada_target: f64,
    /// Change of the augmentation probability per controller update.
    pub ada_speed: f64,
    pub ada_interval: usize,
    pub truncation: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_l2: 10.0,
            lambda_reg: 0.05,
            lr_encoder: 1e-4,
            lr_d: 2e-3,
            r1_gamma: 1.0,
            r1_interval: 16,
            batch: 8,
            steps: 1000,
            max_t: 127,
            ada_enabled: true,
            ada_target: 0.6,
            ada_speed: 0.01,
            ada_interval: 4,
            truncation: 1.0,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_l2 < 0.0 || self.lambda_reg < 0.0 || self.r1_gamma < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr_encoder > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.max_t < 3 {
            return Err(Error::Config(format!("max_t must be >= 3, got {}", self.max_t)));
        }
        if self.batch == 0 || self.r1_interval == 0 || self.ada_interval == 0 {
            return Err(Error::Config("batch, r1_interval and ada_interval must be positive".into()));
        }
        if !(self.truncation > 0.0 && self.truncation <= 1.0) {
            return Err(Error::Config(format!("truncation {} outside (0, 1]", self.truncation)));
        }
        if !(0.0..=1.0).contains(&self.ada_target) {
            return Err(Error::Config(format!("ada_target {} outside [0, 1]", self.ada_target)));
        }
        Ok(())
    }

    /// Reconstruction weight after applying the ablation.
    pub fn effective_lambda_l2(&self) -> f64 {
        if self.ablation.uses_recon() {
            self.lambda_l2
        } else {
            0.0
        }
    }
}

/// Mean of `softplus(sign·x)`.
pub fn mean_softplus<T: Scalar>(g: &mut Graph<T>, x: Var, sign: f64) -> Var {
    let y = if sign == 1.0 { x } else { g.scale(x, T::lit(sign)) };
    let s = g.softplus(y);
    g.mean(s)
}

/// Non-saturating logistic losses from critic logits:
/// `(softplus(D(fake)) + softplus(−D(real)), softplus(−D(fake)))`, batch means.
pub fn adversarial_losses<T: Scalar>(real_logits: &[T], fake_logits: &[T]) -> (T, T) {
    let mean = |v: &[T], sign: T| -> T {
        v.iter().map(|&x| crate::autograd::kernels::softplus(sign * x)).sum::<T>() / T::lit(v.len() as f64)
    };
    let loss_d = mean(fake_logits, T::one()) + mean(real_logits, -T::one());
    let loss_g = mean(fake_logits, -T::one());
    (loss_d, loss_g)
}

/// Mean squared difference of two images.
pub fn recon_loss<T: Scalar>(a: &crate::tensor::Tensor<T>, b: &crate::tensor::Tensor<T>) -> Result<T> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("recon of {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(s / T::lit(a.numel() as f64))
}

/// `Σ_i ‖r_i‖²` over the residuals of one clip.
pub fn latent_reg<T: Scalar>(residuals: &[Vec<T>]) -> T {
    residuals.iter().flat_map(|r| r.iter()).map(|&v| v * v).sum()
}

/// `(loss_D + r1, loss_G + λ_L2·recon + λ_reg·reg)`.
pub fn total_objective<T: Scalar>(loss_d: T, r1: T, loss_g: T, recon: T, reg: T, lambda_l2: f64, lambda_reg: f64) -> (T, T) {
    (loss_d + r1, loss_g + T::lit(lambda_l2) * recon + T::lit(lambda_reg) * reg)
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub values: Vec<(&'static str, f64)>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={}", self.step)?;
        for (k, v) in &self.values {
            write!(f, " {k}={v:.9e}")?;
        }
        Ok(())
    }
}
