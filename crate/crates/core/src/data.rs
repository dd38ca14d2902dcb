//! Synthetic "identity + motion" videos.
//!
//! Each video shows one shape with a fixed class, colour and size orbiting
//! the image centre while spinning. Frames are rendered on demand with 4×4
//! supersampling into `[-1, 1]`.

use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::sample_timestamps;

pub const BACKGROUND: f64 = -0.8;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSpec {
    pub shape: ShapeKind,
    /// RGB in `[-1, 1]`.
    pub color: [f64; 3],
    /// Circumradius in pixels.
    pub scale: f64,
    /// Orbit centre in pixels.
    pub center: [f64; 2],
    pub orbit_radius: f64,
    /// Radians per frame, for both the orbit and the spin.
    pub angular_velocity: f64,
    pub phase: f64,
    pub length: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl VideoSpec {
    /// Draws identity and motion attributes from `seed`.
    pub fn random(seed: u64, resolution: usize, length: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = resolution as f64;
        let shape = ShapeKind::ALL[rng.random_range(0..3)];
        // Saturated colours: one channel high, one low, one anywhere.
        let mut color = [rng.random_range(0.5..1.0), rng.random_range(-1.0..-0.2), rng.random_range(-1.0..1.0)];
        let rot = rng.random_range(0..3);
        color.rotate_left(rot);
        let speed = rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        Self {
            shape,
            color,
            scale: rng.random_range(0.12..0.2) * res,
            center: [res / 2.0, res / 2.0],
            orbit_radius: rng.random_range(0.1..0.22) * res,
            angular_velocity: speed,
            phase: rng.random_range(0.0..TAU),
            length,
            resolution,
            seed,
        }
    }

    /// Object centre at frame `t`.
    pub fn center_at(&self, t: f64) -> [f64; 2] {
        let a = self.angular_velocity * t + self.phase;
        [self.center[0] + self.orbit_radius * a.cos(), self.center[1] + self.orbit_radius * a.sin()]
    }

    fn covers(&self, px: f64, py: f64, c: [f64; 2], angle: f64) -> bool {
        let (dx, dy) = (px - c[0], py - c[1]);
        let (s, co) = angle.sin_cos();
        // Rotate into the shape frame.
        let (x, y) = (co * dx + s * dy, -s * dx + co * dy);
        let r = self.scale;
        match self.shape {
            ShapeKind::Disc => x * x + y * y <= r * r,
            ShapeKind::Square => {
                let h = r / 2f64.sqrt();
                x.abs() <= h && y.abs() <= h
            }
            ShapeKind::Triangle => (0..3).all(|k| {
                // Inside all three half-planes of an equilateral triangle with circumradius r.
                let n = PI / 2.0 + k as f64 * TAU / 3.0 + PI;
                x * n.cos() + y * n.sin() <= r / 2.0
            }),
        }
    }

    /// Frame `t` as `[3, R, R]`.
    pub fn render_frame(&self, t: usize) -> Result<Tensor<f64>> {
        if t >= self.length {
            return Err(Error::InvalidArgument(format!("frame {t} outside video of length {}", self.length)));
        }
        Ok(self.render_at(t as f64))
    }

    /// Rendering at a real timestamp, without the length check.
    pub fn render_at(&self, t: f64) -> Tensor<f64> {
        let res = self.resolution;
        let c = self.center_at(t);
        let angle = self.angular_velocity * t + self.phase;
        let mut out = vec![0.0; 3 * res * res];
        let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
        for py in 0..res {
            for px in 0..res {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let x = px as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                        let y = py as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                        hits += self.covers(x, y, c, angle) as usize;
                    }
                }
                let cov = hits as f64 / n;
                for ch in 0..3 {
                    out[(ch * res + py) * res + px] = BACKGROUND * (1.0 - cov) + self.color[ch] * cov;
                }
            }
        }
        Tensor::new(&[3, res, res], out).expect("frame shape")
    }
}

/// Coverage-weighted centroid `(x, y)` in pixel coordinates, measured on the
/// channel with the largest contrast against the background.
pub fn centroid(frame: &Tensor<f64>, color: [f64; 3]) -> Option<[f64; 2]> {
    let (res_y, res_x) = (frame.shape()[1], frame.shape()[2]);
    let ch = (0..3).max_by(|&a, &b| (color[a] - BACKGROUND).abs().total_cmp(&(color[b] - BACKGROUND).abs()))?;
    let span = color[ch] - BACKGROUND;
    let plane = &frame.data()[ch * res_x * res_y..(ch + 1) * res_x * res_y];
    let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
    for y in 0..res_y {
        for x in 0..res_x {
            let cov = (plane[y * res_x + x] - BACKGROUND) / span;
            m += cov;
            mx += cov * (x as f64 + 0.5);
            my += cov * (y as f64 + 0.5);
        }
    }
    (m > 0.0).then(|| [mx / m, my / m])
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub videos: Vec<VideoSpec>,
    pub resolution: usize,
}

impl SyntheticDataset {
    pub fn generate(master_seed: u64, videos: usize, resolution: usize, length: usize) -> Result<Self> {
        if videos == 0 || length == 0 {
            return Err(Error::Config("dataset needs at least one video of positive length".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        let videos = (0..videos).map(|_| VideoSpec::random(rng.random(), resolution, length)).collect();
        Ok(Self { videos, resolution })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    /// Class-aware draw: a video uniformly, then a frame uniformly within it.
    pub fn sample_frame(&self, rng: &mut impl Rng) -> Result<(usize, usize)> {
        if self.videos.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let v = rng.random_range(0..self.videos.len());
        let t = rng.random_range(0..self.videos[v].length);
        Ok((v, t))
    }

    /// A sparse training clip at `(0, t₁, t₂, t₃)`.
    pub fn sample_clip(&self, rng: &mut impl Rng, max_t: usize) -> Result<ClipSample> {
        if self.videos.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let video = rng.random_range(0..self.videos.len());
        let spec = &self.videos[video];
        let ts = sample_timestamps(max_t.min(spec.length - 1), rng)?;
        let frames = ts.iter().map(|&t| spec.render_frame(t)).collect::<Result<Vec<_>>>()?;
        Ok(ClipSample::new(video, ts, frames))
    }

    /// First `len` frames of a video.
    pub fn clip(&self, video: usize, len: usize) -> Result<Vec<Tensor<f64>>> {
        let spec = self.videos.get(video).ok_or_else(|| Error::InvalidArgument(format!("no video {video}")))?;
        (0..len).map(|t| spec.render_frame(t)).collect()
    }
}

/// Frames of one video at `(0, t₁, t₂, t₃)`.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub video: usize,
    pub timestamps: [usize; 4],
    pub deltas: [f64; 3],
    pub frames: Vec<Tensor<f64>>,
}

impl ClipSample {
    pub fn new(video: usize, timestamps: [usize; 4], frames: Vec<Tensor<f64>>) -> Self {
        let deltas = [0, 1, 2].map(|i| (timestamps[i + 1] - timestamps[i]) as f64);
        Self { video, timestamps, deltas, frames }
    }
}

/// Deterministic colour change used as a style-transfer target: channels
/// rotate and are pushed toward a warmer palette.
pub fn color_remap(frame: &Tensor<f64>) -> Tensor<f64> {
    let plane = frame.numel() / 3;
    let d = frame.data();
    let mut out = vec![0.0; d.len()];
    for i in 0..plane {
        let (r, g, b) = (d[i], d[plane + i], d[2 * plane + i]);
        out[i] = (0.6 * b + 0.4).clamp(-1.0, 1.0);
        out[plane + i] = r;
        out[2 * plane + i] = (0.8 * g - 0.2).clamp(-1.0, 1.0);
    }
    Tensor::new(frame.shape(), out).expect("shape")
}
