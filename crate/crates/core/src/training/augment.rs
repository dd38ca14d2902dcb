//! Adaptive discriminator augmentation with per-clip consistency.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One augmentation draw, shared by every frame of a clip.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Augment {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
    pub brightness: f64,
}

impl Augment {
    /// Each of flip, translation and brightness is enabled with probability `p`.
    pub fn sample(p: f64, resolution: usize, rng: &mut impl Rng) -> Self {
        let mut a = Augment::default();
        if p <= 0.0 {
            return a;
        }
        if rng.random::<f64>() < p {
            a.flip = rng.random_bool(0.5);
        }
        if rng.random::<f64>() < p {
            let m = (resolution / 8).max(1) as i64;
            a.dx = rng.random_range(-m..=m);
            a.dy = rng.random_range(-m..=m);
        }
        if rng.random::<f64>() < p {
            a.brightness = Normal::new(0.0, 0.2).expect("valid").sample(rng);
        }
        a
    }

    pub fn is_identity(&self) -> bool {
        *self == Augment::default()
    }
}

fn reflect(i: i64, n: i64) -> i64 {
    let period = 2 * (n - 1).max(1);
    let m = i.rem_euclid(period);
    if m < n {
        m
    } else {
        period - m
    }
}

/// Applies `augs[k]` to frames `k·frames_per_clip .. (k+1)·frames_per_clip` of `x: [N, C, H, W]`.
pub fn augment_graph<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    augs: &[Augment],
    frames_per_clip: usize,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 || s[0] != augs.len() * frames_per_clip {
        return Err(Error::Shape(format!("{} augmentations of {frames_per_clip} frames for {s:?}", augs.len())));
    }
    if augs.iter().all(Augment::is_identity) {
        return Ok(x);
    }
    let (c, h, w) = (s[1], s[2] as i64, s[3] as i64);
    let plane = (h * w) as usize;
    let mut idx = Vec::with_capacity(s.iter().product());
    let mut offset = Vec::with_capacity(idx.capacity());
    for n in 0..s[0] {
        let a = augs[n / frames_per_clip];
        for ch in 0..c {
            let base = ((n * c + ch) * plane) as isize;
            for y in 0..h {
                for xx in 0..w {
                    let mut sx = reflect(xx - a.dx, w);
                    if a.flip {
                        sx = w - 1 - sx;
                    }
                    let sy = reflect(y - a.dy, h);
                    idx.push(base + (sy * w + sx) as isize);
                    offset.push(T::lit(a.brightness));
                }
            }
        }
    }
    let moved = g.gather_elems(x, idx, &s)?;
    if augs.iter().all(|a| a.brightness == 0.0) {
        return Ok(moved);
    }
    let shift = g.constant(Tensor::new(&s, offset)?);
    g.add(moved, shift)
}

pub fn augment_tensor<T: Scalar>(x: &Tensor<T>, augs: &[Augment], frames_per_clip: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = augment_graph(&mut g, v, augs, frames_per_clip)?;
    Ok(g.value(y).clone())
}

/// Moves `p` by `speed` toward making the mean sign of real logits equal `target`.
pub fn ada_controller(real_sign_mean: f64, p: f64, target: f64, speed: f64) -> f64 {
    let dir = if real_sign_mean > target {
        1.0
    } else if real_sign_mean < target {
        -1.0
    } else {
        0.0
    };
    (p + dir * speed).clamp(0.0, 1.0)
}

/// Running overfitting heuristic and augmentation probability.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdaState {
    pub p: f64,
    sign_sum: f64,
    count: usize,
}

impl AdaState {
    pub fn observe<T: Scalar>(&mut self, real_logits: &[T]) {
        self.sign_sum += real_logits.iter().map(|l| l.re_f64().signum()).sum::<f64>();
        self.count += real_logits.len();
    }

    /// Applies the controller to the signs seen since the last update.
    pub fn update(&mut self, target: f64, speed: f64) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let h = self.sign_sum / self.count as f64;
        self.p = ada_controller(h, self.p, target, speed);
        self.sign_sum = 0.0;
        self.count = 0;
        Some(h)
    }
}
