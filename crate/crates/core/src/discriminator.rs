//! Discriminators and the R1 penalty.
//!
//! Both critics share a per-frame feature extractor `φ` (stem conv, strided
//! conv blocks down to 4×4, a dense layer). The video critic scores a clip of
//! frames together with the time gaps between them; the image critic scores
//! single frames and is used to pretrain the decoder.
//!
//! R1 parameter gradients are second-order. They are computed exactly as a
//! Hessian-vector product: with `g = ∇ₓD(x)`, running the critic over dual
//! numbers at `x + ε·g` makes the `ε` part of the parameter gradient equal to
//! `∇_θ ½‖g‖²`.

use crate::autograd::{Graph, Var};
use crate::dual::Dual;
use crate::error::{Error, Result};
use crate::nn::{self, Bound, GradMap, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_R1_GAMMA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub img_resolution: usize,
    pub img_channels: usize,
    /// Stem width; each block doubles it up to `channel_max`.
    pub base_channels: usize,
    pub channel_max: usize,
    pub feature_dim: usize,
    pub delta_embed_dim: usize,
    pub head_hidden: usize,
    /// Frames per clip; `deltas = frames − 1`.
    pub frames: usize,
}

impl DiscriminatorConfig {
    pub fn for_resolution(img_resolution: usize, img_channels: usize) -> Self {
        Self {
            img_resolution,
            img_channels,
            base_channels: (256 / img_resolution).max(4),
            channel_max: 64,
            feature_dim: 64,
            delta_embed_dim: 16,
            head_hidden: 64,
            frames: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.img_resolution < 4 || !self.img_resolution.is_power_of_two() {
            return Err(Error::Config(format!("discriminator resolution {} invalid", self.img_resolution)));
        }
        if [self.base_channels, self.channel_max, self.feature_dim, self.delta_embed_dim, self.head_hidden].contains(&0) {
            return Err(Error::Config("discriminator widths must be positive".into()));
        }
        Ok(())
    }

    fn block_channels(&self) -> Vec<(usize, usize)> {
        let blocks = (self.img_resolution / 4).trailing_zeros() as usize;
        let mut c = self.base_channels.min(self.channel_max);
        (0..blocks)
            .map(|_| {
                let next = (c * 2).min(self.channel_max);
                let pair = (c, next);
                c = next;
                pair
            })
            .collect()
    }

    fn last_channels(&self) -> usize {
        self.block_channels().last().map_or(self.base_channels.min(self.channel_max), |p| p.1)
    }
}

fn add_phi<T: Scalar>(cfg: &DiscriminatorConfig, store: &mut ParamStore<T>, init: &mut Init, prefix: &str) {
    let stem = cfg.base_channels.min(cfg.channel_max);
    nn::add_conv(store, init, &format!("{prefix}.fromrgb"), cfg.img_channels, stem, 1, true);
    for (i, (cin, cout)) in cfg.block_channels().into_iter().enumerate() {
        nn::add_conv(store, init, &format!("{prefix}.b{i}.conv0"), cin, cin, 3, true);
        nn::add_conv(store, init, &format!("{prefix}.b{i}.conv1"), cin, cout, 3, true);
    }
    nn::add_dense(store, init, &format!("{prefix}.fc"), cfg.last_channels() * 16, cfg.feature_dim, 1.0, 0.0);
}

/// `x: [N, C, H, W]` → `[N, feature_dim]`.
fn phi<S: Scalar>(cfg: &DiscriminatorConfig, g: &mut Graph<S>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != cfg.img_channels || xs[2] != cfg.img_resolution || xs[3] != cfg.img_resolution {
        return Err(Error::Shape(format!(
            "discriminator expects [N, {}, {}, {}] frames, got {xs:?}",
            cfg.img_channels, cfg.img_resolution, cfg.img_resolution
        )));
    }
    let mut h = nn::conv(g, b, &format!("{prefix}.fromrgb"), x, 1)?;
    h = nn::lrelu(g, h);
    for i in 0..cfg.block_channels().len() {
        h = nn::conv(g, b, &format!("{prefix}.b{i}.conv0"), h, 1)?;
        h = nn::lrelu(g, h);
        h = nn::conv(g, b, &format!("{prefix}.b{i}.conv1"), h, 1)?;
        h = nn::lrelu(g, h);
        h = g.avg_pool2x(h)?;
    }
    let flat = g.reshape(h, &[xs[0], cfg.last_channels() * 16])?;
    let f = nn::dense(g, b, &format!("{prefix}.fc"), flat, 1.0)?;
    Ok(nn::lrelu(g, f))
}

/// A critic whose forward pass can be built over any scalar type.
pub trait Critic {
    /// Frames per sample.
    fn frames(&self) -> usize;

    /// `frames: [B·frames(), C, H, W]` in sample-major order, `deltas` holds
    /// `B·(frames() − 1)` gaps. Returns logits `[B, 1]`.
    fn logits_graph<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, frames: Var, deltas: &[f64]) -> Result<Var>;
}

/// Input of the δ embedding.
pub fn delta_feature(delta: f64) -> f64 {
    delta.ln_1p()
}

fn check_deltas(deltas: &[f64], expected: usize) -> Result<()> {
    if deltas.len() != expected {
        return Err(Error::Shape(format!("{} time deltas, expected {expected}", deltas.len())));
    }
    if let Some(d) = deltas.iter().find(|d| !(**d >= 0.0 && d.is_finite())) {
        return Err(Error::InvalidArgument(format!("time delta {d} must be finite and >= 0")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct VideoDiscriminator {
    pub config: DiscriminatorConfig,
}

impl VideoDiscriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        if config.frames < 2 {
            return Err(Error::Config("video discriminator needs at least two frames".into()));
        }
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        add_phi(c, &mut store, &mut init, "dvid.phi");
        nn::add_dense(&mut store, &mut init, "dvid.embed.fc0", 1, c.delta_embed_dim, 1.0, 0.0);
        nn::add_dense(&mut store, &mut init, "dvid.embed.fc1", c.delta_embed_dim, c.delta_embed_dim, 1.0, 0.0);
        let head_in = c.frames * c.feature_dim + (c.frames - 1) * c.delta_embed_dim;
        nn::add_dense(&mut store, &mut init, "dvid.head.fc0", head_in, c.head_hidden, 1.0, 0.0);
        nn::add_dense(&mut store, &mut init, "dvid.head.out", c.head_hidden, 1, 1.0, 0.0);
        store
    }

    /// `[deltas.len(), delta_embed_dim]` embeddings of `log(1 + δ)`.
    pub fn embed_graph<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, deltas: &[f64]) -> Result<Var> {
        let x = g.constant(Tensor::new(&[deltas.len(), 1], deltas.iter().map(|&d| S::lit(delta_feature(d))).collect())?);
        let h = nn::dense(g, b, "dvid.embed.fc0", x, 1.0)?;
        let h = nn::lrelu(g, h);
        nn::dense(g, b, "dvid.embed.fc1", h, 1.0)
    }

    pub fn embed_delta<T: Scalar>(&self, params: &ParamStore<T>, delta: f64) -> Result<Vec<T>> {
        check_deltas(&[delta], 1)?;
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let e = self.embed_graph(&mut g, &b, &[delta])?;
        Ok(g.value(e).data().to_vec())
    }

    /// Logit of one clip given as `frames()` tensors `[C, H, W]`.
    pub fn discriminate<T: Scalar>(&self, params: &ParamStore<T>, frames: &[&Tensor<T>], deltas: &[f64]) -> Result<T> {
        if frames.len() != self.config.frames {
            return Err(Error::InvalidArgument(format!(
                "discriminator takes {} frames, got {}",
                self.config.frames,
                frames.len()
            )));
        }
        let stacked = Tensor::stack(&frames.iter().map(|f| (*f).clone()).collect::<Vec<_>>())?;
        let mut g = Graph::new();
        let b = params.bind_all(&mut g, false);
        let x = g.constant(stacked);
        let l = self.logits_graph(&mut g, &b, x, deltas)?;
        Ok(g.value(l).item())
    }
}

impl Critic for VideoDiscriminator {
    fn frames(&self) -> usize {
        self.config.frames
    }

    fn logits_graph<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, frames: Var, deltas: &[f64]) -> Result<Var> {
        let c = &self.config;
        let n = g.shape(frames)[0];
        if n % c.frames != 0 || n == 0 {
            return Err(Error::InvalidArgument(format!("{n} frames is not a whole number of {}-frame clips", c.frames)));
        }
        let batch = n / c.frames;
        check_deltas(deltas, batch * (c.frames - 1))?;
        let f = phi(c, g, b, "dvid.phi", frames)?;
        let f = g.reshape(f, &[batch, c.frames * c.feature_dim])?;
        let e = self.embed_graph(g, b, deltas)?;
        let e = g.reshape(e, &[batch, (c.frames - 1) * c.delta_embed_dim])?;
        let h = g.concat(&[f, e], 1)?;
        let h = nn::dense(g, b, "dvid.head.fc0", h, 1.0)?;
        let h = nn::lrelu(g, h);
        nn::dense(g, b, "dvid.head.out", h, 1.0)
    }
}

#[derive(Clone, Debug)]
pub struct ImageDiscriminator {
    pub config: DiscriminatorConfig,
}

impl ImageDiscriminator {
    pub fn new(config: DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        let c = &self.config;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        add_phi(c, &mut store, &mut init, "dimg.phi");
        nn::add_dense(&mut store, &mut init, "dimg.head.out", c.feature_dim, 1, 1.0, 0.0);
        store
    }
}

impl Critic for ImageDiscriminator {
    fn frames(&self) -> usize {
        1
    }

    fn logits_graph<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, frames: Var, deltas: &[f64]) -> Result<Var> {
        check_deltas(deltas, 0)?;
        let f = phi(&self.config, g, b, "dimg.phi", frames)?;
        nn::dense(g, b, "dimg.head.out", f, 1.0)
    }
}

/// `(γ/2)·mean_b ‖∇ₓ D(x_b)‖²` over a batch of real samples.
pub fn r1_penalty<T: Scalar, C: Critic>(critic: &C, params: &ParamStore<T>, frames: &Tensor<T>, deltas: &[f64], gamma: f64) -> Result<T> {
    let (g2, batch) = input_grad_sq(critic, params, frames, deltas)?;
    Ok(T::lit(gamma * 0.5 * g2.re_f64() / batch as f64))
}

fn input_grad<T: Scalar, C: Critic>(critic: &C, params: &ParamStore<T>, frames: &Tensor<T>, deltas: &[f64]) -> Result<(Tensor<T>, usize)> {
    let mut g = Graph::new();
    let b = params.bind_all(&mut g, false);
    let x = g.param(frames.clone());
    let logits = critic.logits_graph(&mut g, &b, x, deltas)?;
    let batch = g.shape(logits)[0];
    let total = g.sum(logits);
    let mut grads = g.backward(total)?;
    let gx = grads.take(x).ok_or_else(|| Error::Numeric("no gradient reached the critic input".into()))?;
    Ok((gx, batch))
}

fn input_grad_sq<T: Scalar, C: Critic>(critic: &C, params: &ParamStore<T>, frames: &Tensor<T>, deltas: &[f64]) -> Result<(T, usize)> {
    let (gx, batch) = input_grad(critic, params, frames, deltas)?;
    Ok((gx.data().iter().map(|&v| v * v).sum(), batch))
}

/// R1 value and its exact gradient with respect to the critic parameters.
pub fn r1_with_grads<T: Scalar, C: Critic>(
    critic: &C,
    params: &ParamStore<T>,
    frames: &Tensor<T>,
    deltas: &[f64],
    gamma: f64,
) -> Result<(T, GradMap<T>)> {
    let (gx, batch) = input_grad(critic, params, frames, deltas)?;
    let g2: T = gx.data().iter().map(|&v| v * v).sum();
    let value = T::lit(gamma * 0.5 * g2.re_f64() / batch as f64);
    if gamma == 0.0 {
        return Ok((value, GradMap::new()));
    }

    let dual_params: ParamStore<Dual<T>> = params.cast();
    let tangent: Vec<Dual<T>> = frames.data().iter().zip(gx.data()).map(|(&x, &d)| Dual::new(x, d)).collect();
    let mut g = Graph::<Dual<T>>::new();
    let b = dual_params.bind_all(&mut g, true);
    let x = g.constant(Tensor::new(frames.shape(), tangent)?);
    let logits = critic.logits_graph(&mut g, &b, x, deltas)?;
    let total = g.sum(logits);
    let grads = b.collect(&g.backward(total)?);
    // ε part is ∇θ ½‖g‖²; the penalty is (γ/2)/B · ‖g‖².
    let scale = T::lit(gamma / batch as f64);
    let out = grads.into_iter().map(|(n, t)| (n, Tensor::new(t.shape(), t.data().iter().map(|d| d.eps * scale).collect()).expect("shape"))).collect();
    Ok((value, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DiscriminatorConfig {
        DiscriminatorConfig {
            img_resolution: 8,
            img_channels: 2,
            base_channels: 2,
            channel_max: 4,
            feature_dim: 3,
            delta_embed_dim: 2,
            head_hidden: 3,
            frames: 4,
        }
    }

    fn frames(n: usize, salt: u64) -> Tensor<f64> {
        let mut init = Init::new(salt);
        init.normal(&[n, 2, 8, 8], 0.5)
    }

    #[test]
    fn frame_count_and_delta_checks() {
        let d = VideoDiscriminator::new(tiny()).unwrap();
        let p = d.init_params::<f64>(1);
        let f = frames(4, 2).unstack();
        let refs: Vec<&Tensor<f64>> = f.iter().collect();
        assert!(d.discriminate(&p, &refs[..3], &[1.0, 1.0, 1.0]).is_err());
        assert!(d.discriminate(&p, &refs, &[1.0, -1.0, 1.0]).is_err());
        assert!(d.discriminate(&p, &refs, &[1.0, 1.0]).is_err());
        assert!(d.discriminate(&p, &[refs[0]; 4], &[0.0; 3]).unwrap().is_finite());
    }

    #[test]
    fn zeroed_head_gives_bias() {
        let d = VideoDiscriminator::new(tiny()).unwrap();
        let mut p = d.init_params::<f64>(1);
        p.insert("dvid.head.out.weight", Tensor::zeros(&[1, 3]));
        p.insert("dvid.head.out.bias", Tensor::full(&[1], 0.625));
        let f = frames(4, 3).unstack();
        let refs: Vec<&Tensor<f64>> = f.iter().collect();
        assert_eq!(d.discriminate(&p, &refs, &[1.0, 5.0, 2.0]).unwrap(), 0.625);
    }

    #[test]
    fn frame_order_matters() {
        let d = VideoDiscriminator::new(tiny()).unwrap();
        let p = d.init_params::<f64>(4);
        let f = frames(4, 5).unstack();
        let a = d.discriminate(&p, &[&f[0], &f[1], &f[2], &f[3]], &[2.0, 3.0, 4.0]).unwrap();
        let b = d.discriminate(&p, &[&f[0], &f[2], &f[1], &f[3]], &[5.0, -3.0 + 6.0, 4.0]).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn delta_embedding_input() {
        assert_eq!(delta_feature(0.0), 0.0);
        assert!((delta_feature(std::f64::consts::E - 1.0) - 1.0).abs() < 1e-15);
        let d = VideoDiscriminator::new(tiny()).unwrap();
        let p = d.init_params::<f64>(1);
        assert_eq!(d.embed_delta(&p, 0.0).unwrap(), d.embed_delta(&p, 0.0).unwrap());
        assert!(d.embed_delta(&p, -0.5).is_err());
    }

    #[test]
    fn r1_of_constant_critic_and_zero_gamma() {
        let d = ImageDiscriminator::new(tiny()).unwrap();
        let mut p = d.init_params::<f64>(1);
        let x = frames(3, 7);
        assert_eq!(r1_penalty(&d, &p, &x, &[], 0.0).unwrap(), 0.0);
        p.insert("dimg.head.out.weight", Tensor::zeros(&[1, 3]));
        let (v, grads) = r1_with_grads(&d, &p, &x, &[], 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(grads.values().all(|t| t.is_finite()));
    }

    /// Hessian-vector route against central differences of the penalty value.
    #[test]
    fn r1_gradient_matches_finite_differences() {
        let d = VideoDiscriminator::new(tiny()).unwrap();
        let p = d.init_params::<f64>(11);
        let x = frames(8, 12);
        let deltas = [1.0, 2.0, 7.0, 3.0, 0.0, 4.0];
        let (_, analytic) = r1_with_grads(&d, &p, &x, &deltas, 1.0).unwrap();
        let names: Vec<String> = p.names().map(str::to_owned).collect();
        let (worst, bad) = nn::gradcheck::check(
            &p,
            &analytic,
            &names,
            |s| r1_penalty(&d, s, &x, &deltas, 1.0).unwrap(),
            1e-5,
            1e-4,
            1e-7,
            3,
        );
        assert!(bad.is_empty(), "worst {worst}: {:?}", &bad[..bad.len().min(5)]);
    }
}
