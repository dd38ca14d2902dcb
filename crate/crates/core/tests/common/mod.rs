//! Fixtures shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use styleinv::ape::{AnchorTrack, ApeConfig, ApeVariant, FfaApe, Query};
use styleinv::autograd::{Graph, Var};
use styleinv::data::SyntheticDataset;
use styleinv::decoder::{sample_z, stack_noise, DecoderConfig, LatentDecoder, NoiseMode};
use styleinv::discriminator::{r1_with_grads, Critic, DiscriminatorConfig, ImageDiscriminator, VideoDiscriminator};
use styleinv::encoder::{EncoderConfig, StyleInv, StyleInvConfig};
use styleinv::error::Result;
use styleinv::nn::gradcheck::{rel_err, Mismatch};
use styleinv::nn::{Bound, Init, ParamStore};
use styleinv::scalar::Scalar;
use styleinv::style::{StyleConfig, StyleHead};
use styleinv::tensor::Tensor;
use styleinv::training::{Ablation, SparseTrainer, TrainConfig};

/// Central-difference steps. Small steps are biased by rounding, large ones
/// by leaky-ReLU kinks that fall inside the stencil; each component keeps its
/// best estimate, and a wrong analytic gradient is off at every step.
pub const FD_STEPS: [f64; 4] = [1e-5, 1e-4, 1e-6, 1e-7];
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-6;
pub const COMPONENT_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

/// 8×8 decoder with `channels` image channels and 4-wide features.
pub fn dec_cfg(channels: usize, noise_mode: NoiseMode) -> DecoderConfig {
    DecoderConfig {
        z_dim: 4,
        w_dim: 4,
        img_resolution: 8,
        img_channels: channels,
        channel_base: 32,
        channel_max: 4,
        mapping_layers: 2,
        layers_per_block: 1,
        noise_mode,
    }
}

pub fn disc_cfg(channels: usize, frames: usize) -> DiscriminatorConfig {
    DiscriminatorConfig {
        img_resolution: 8,
        img_channels: channels,
        base_channels: 2,
        channel_max: 4,
        feature_dim: 3,
        delta_embed_dim: 2,
        head_hidden: 3,
        frames,
    }
}

/// Overwrites every tensor whose name passes `pick` with N(0, std²) draws.
pub fn randomize(store: &mut ParamStore<f64>, pick: impl Fn(&str) -> bool, seed: u64, std: f64) {
    let mut init = Init::new(seed);
    let names: Vec<String> = store.names().filter(|n| pick(n)).map(str::to_owned).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, init.normal(&shape, std));
    }
}

/// Decoder whose zero-initialised noise strengths and biases are perturbed so
/// that every parameter carries a nonzero gradient.
pub fn tiny_decoder(channels: usize, seed: u64) -> LatentDecoder<f64> {
    let mut d = LatentDecoder::new(dec_cfg(channels, NoiseMode::ConstantPerVideo), seed).unwrap();
    randomize(&mut d.params, |n| n.ends_with("noise_strength") || n.ends_with(".bias"), seed + 1, 0.3);
    d
}

pub fn styleinv_cfg(dec: &DecoderConfig, variant: ApeVariant) -> StyleInvConfig {
    let mut c = StyleInvConfig::for_decoder(dec);
    c.ape.anchor_distance = 8.0;
    c.ape.variant = variant;
    c
}

/// Motion generator with its zero-initialised tensors (site affines, final
/// projection, interpolation logits) replaced by small random values.
pub fn tiny_styleinv(dec: &DecoderConfig, variant: ApeVariant, seed: u64) -> StyleInv<f64> {
    let mut m = StyleInv::new(styleinv_cfg(dec, variant), seed).unwrap();
    randomize(
        &mut m.params,
        |n| n.starts_with("style.site") || n.starts_with("encoder.out") || n == "ape.interp_s",
        seed + 1,
        0.3,
    );
    m
}

pub fn tiny_dataset(seed: u64, videos: usize) -> SyntheticDataset {
    SyntheticDataset::generate(seed, videos, 8, 48).unwrap()
}

pub fn tiny_train_config(ablation: Ablation, seed: u64) -> TrainConfig {
    TrainConfig { batch: 2, max_t: 40, ablation, seed, ..TrainConfig::default() }
}

/// A 3-channel sparse trainer on the synthetic dataset.
pub fn tiny_trainer(ablation: Ablation, seed: u64) -> SparseTrainer<f64> {
    let dec = tiny_decoder(3, seed);
    let variant = if ablation == Ablation::NoApe { ApeVariant::Acyclic } else { ApeVariant::FirstFrameAware };
    let model = tiny_styleinv(&dec.config, variant, seed + 10);
    let critic = VideoDiscriminator::new(disc_cfg(3, ablation.critic_frames())).unwrap();
    let d_params = critic.init_params(seed + 20);
    SparseTrainer::new(tiny_train_config(ablation, seed), dec, model, critic, d_params, tiny_dataset(seed + 30, 4))
        .unwrap()
}

/// Fixed random tensor used to contract network outputs into a scalar loss.
pub fn coefficients(shape: &[usize], seed: u64) -> Tensor<f64> {
    Init::new(seed).normal(shape, 1.0)
}

/// `Σ c ⊙ x` with a fixed random `c`.
pub fn contract(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let c = g.constant(coefficients(g.shape(x), seed));
    let p = g.mul(x, c).unwrap();
    g.sum(p)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub component: &'static str,
    pub tol: f64,
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn summary(&self) -> String {
        let first = self.failures.first().map(|m| format!(" first={}[{}] a={:e} n={:e}", m.name, m.index, m.analytic, m.numeric));
        format!(
            "{}: {} components, worst rel err {:.2e} (tol {:.0e}), {} above tol{}",
            self.component,
            self.checked,
            self.worst,
            self.tol,
            self.failures.len(),
            first.unwrap_or_default()
        )
    }
}

/// Checks the analytic gradient of `build` against central differences for
/// every tensor of `store` whose name passes `pick`.
pub fn check_graph(
    component: &'static str,
    store: &ParamStore<f64>,
    pick: impl Fn(&str) -> bool,
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &Bound) -> Var,
) -> GradReport {
    let mut g = Graph::new();
    let b = store.bind_all(&mut g, true);
    let l = build(&mut g, &b);
    let analytic = b.collect(&g.backward(l).unwrap());
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let b = s.bind_all(&mut g, false);
        let l = build(&mut g, &b);
        g.value(l).item()
    };
    check_named(component, store, &analytic, pick, tol, loss)
}

pub fn check_named(
    component: &'static str,
    store: &ParamStore<f64>,
    analytic: &styleinv::nn::GradMap<f64>,
    pick: impl Fn(&str) -> bool,
    tol: f64,
    mut loss: impl FnMut(&ParamStore<f64>) -> f64,
) -> GradReport {
    let names: Vec<String> = store.names().filter(|n| pick(n)).map(str::to_owned).collect();
    let mut work = store.clone();
    let (mut checked, mut worst, mut failures) = (0, 0.0f64, Vec::new());
    for name in &names {
        let zeros = Tensor::zeros(store.get(name).unwrap().shape());
        let a = analytic.get(name).unwrap_or(&zeros);
        for i in 0..a.numel() {
            let orig = store.get(name).unwrap().data()[i];
            let mut best: Option<(f64, f64)> = None;
            for &h in &FD_STEPS {
                work.get_mut(name).unwrap().data_mut()[i] = orig + h;
                let fp = loss(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig - h;
                let fm = loss(&work);
                work.get_mut(name).unwrap().data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let e = rel_err(a.data()[i], numeric, FD_FLOOR);
                if best.is_none_or(|(b, _)| e < b) {
                    best = Some((e, numeric));
                }
                if e <= tol {
                    break;
                }
            }
            let (e, numeric) = best.expect("at least one step");
            checked += 1;
            worst = worst.max(e);
            if e > tol {
                failures.push(Mismatch { name: name.clone(), index: i, analytic: a.data()[i], numeric, rel_err: e });
            }
        }
    }
    GradReport { component, tol, checked, worst, failures }
}

fn decoder_report() -> GradReport {
    let dec = tiny_decoder(2, 101);
    let z: Vec<f64> = (0..2).flat_map(|i| sample_z::<f64>(7, i, 4)).collect();
    let noise: Vec<_> = [3u64, 4].iter().map(|&s| dec.sample_video_noise(s)).collect();
    let noise = stack_noise(&noise.iter().collect::<Vec<_>>()).unwrap();
    check_graph("decoder", &dec.params, |_| true, COMPONENT_TOL, |g, b| {
        let zv = g.constant(Tensor::new(&[2, 4], z.clone()).unwrap());
        let w = dec.mapping_graph(g, b, zv).unwrap();
        let img = dec.synthesis_graph(g, b, w, Some(&noise), None).unwrap();
        contract(g, img, 102)
    })
}

fn ape_report() -> GradReport {
    let cfg = ApeConfig { anchor_distance: 4.0, code_dim: 3, kernel_size: 3, pad_len: 2, ..ApeConfig::default() };
    let ape = FfaApe::new(cfg).unwrap();
    let mut store = ParamStore::new();
    ape.add_params(&mut store, &mut Init::new(201));
    randomize(&mut store, |n| n == "ape.interp_s", 202, 1.0);
    let tracks = [AnchorTrack::new(5), AnchorTrack::new(6)];
    let ts = [0.0, 0.7, 3.9, 5.25, 17.5, 30.1];
    let queries: Vec<Query> = (0..2).flat_map(|k| ts.iter().map(move |&t| Query { track: k, t })).collect();
    check_graph("ffa_ape", &store, |_| true, COMPONENT_TOL, |g, b| {
        let v = ape.encode_graph(g, b, &tracks, &queries).unwrap();
        contract(g, v, 203)
    })
}

fn style_report() -> GradReport {
    let head = StyleHead::new(StyleConfig { code_dim: 3, w_dim: 4, style_dim: 5, site_channels: vec![2, 3] }).unwrap();
    let mut store = ParamStore::new();
    head.add_params(&mut store, &mut Init::new(301));
    randomize(&mut store, |n| n.starts_with("style.site") || n.ends_with(".bias"), 302, 0.5);
    let v = coefficients(&[3, 3], 303);
    let w0 = coefficients(&[3, 4], 304);
    check_graph("style_head", &store, |_| true, COMPONENT_TOL, |g, b| {
        let vv = g.constant(v.clone());
        let wv = g.constant(w0.clone());
        let s = head.fuse_graph(g, b, vv, wv).unwrap();
        let mut total = contract(g, s, 305);
        for site in 0..2 {
            let (gm, bt) = head.site_graph(g, b, s, site).unwrap();
            let a = contract(g, gm, 306 + site as u64);
            let c = contract(g, bt, 308 + site as u64);
            total = g.add(total, a).unwrap();
            total = g.add(total, c).unwrap();
        }
        total
    })
}

fn encoder_report() -> GradReport {
    let cfg = EncoderConfig { img_resolution: 8, img_channels: 2, w_dim: 4, stem_channels: 2, block_channels: vec![3, 3] };
    let enc = styleinv::encoder::Encoder::new(cfg).unwrap();
    let mut store = ParamStore::new();
    enc.add_params(&mut store, &mut Init::new(401));
    randomize(&mut store, |n| n.starts_with("encoder.out") || n.ends_with(".bias"), 402, 0.5);
    let x = coefficients(&[2, 2, 8, 8], 403);
    let mods: Vec<(Tensor<f64>, Tensor<f64>)> = (0..2)
        .map(|i| {
            let gamma = coefficients(&[2, 3], 404 + i).map(|v| 1.0 + 0.3 * v);
            (gamma, coefficients(&[2, 3], 410 + i).map(|v| 0.3 * v))
        })
        .collect();
    check_graph("encoder", &store, |_| true, COMPONENT_TOL, |g, b| {
        let xv = g.constant(x.clone());
        let m: Vec<(Var, Var)> = mods.iter().map(|(a, c)| (g.constant(a.clone()), g.constant(c.clone()))).collect();
        let r = enc.forward_graph(g, b, xv, Some(&m)).unwrap();
        contract(g, r, 420)
    })
}

fn video_disc_report() -> GradReport {
    let d = VideoDiscriminator::new(disc_cfg(2, 4)).unwrap();
    let p = d.init_params::<f64>(501);
    let x = coefficients(&[8, 2, 8, 8], 502).map(|v| 0.5 * v);
    let deltas = [1.0, 2.0, 7.0, 3.0, 0.5, 4.0];
    check_graph("video_discriminator", &p, |_| true, COMPONENT_TOL, |g, b| {
        let xv = g.constant(x.clone());
        let l = d.logits_graph(g, b, xv, &deltas).unwrap();
        contract(g, l, 503)
    })
}

fn image_disc_report() -> GradReport {
    let d = ImageDiscriminator::new(disc_cfg(2, 1)).unwrap();
    let p = d.init_params::<f64>(601);
    let x = coefficients(&[3, 2, 8, 8], 602).map(|v| 0.5 * v);
    check_graph("image_discriminator", &p, |_| true, COMPONENT_TOL, |g, b| {
        let xv = g.constant(x.clone());
        let l = d.logits_graph(g, b, xv, &[]).unwrap();
        contract(g, l, 603)
    })
}

/// Parameter gradient of the R1 penalty, which runs through the
/// Hessian-vector route.
fn r1_report() -> GradReport {
    let d = VideoDiscriminator::new(disc_cfg(2, 4)).unwrap();
    let p = d.init_params::<f64>(701);
    let x = coefficients(&[8, 2, 8, 8], 702).map(|v| 0.5 * v);
    let deltas = [1.0, 2.0, 7.0, 3.0, 0.5, 4.0];
    let (_, analytic) = r1_with_grads(&d, &p, &x, &deltas, 1.0).unwrap();
    check_named("r1_penalty", &p, &analytic, |_| true, COMPONENT_TOL, |s| {
        styleinv::discriminator::r1_penalty(&d, s, &x, &deltas, 1.0).unwrap()
    })
}

/// `Σ c ⊙ G(styleinv(w0, t))` with the decoder frozen: positional encoding,
/// style head and modulated encoder in one chain.
fn styleinv_path_report() -> GradReport {
    let dec = tiny_decoder(2, 801);
    let model = tiny_styleinv(&dec.config, ApeVariant::FirstFrameAware, 802);
    let ws: Vec<_> = [11u64, 12].iter().map(|&s| dec.map_latent(&sample_z(s, 0, 4), 1.0).unwrap()).collect();
    let noises: Vec<_> = [11u64, 12].iter().map(|&s| dec.sample_video_noise(s)).collect();
    let first = dec.synthesize_batch(&ws, Some(&noises)).unwrap();
    let w0 = styleinv::decoder::stack_latents(&ws).unwrap();
    let tracks = [AnchorTrack::new(11), AnchorTrack::new(12)];
    let queries: Vec<Query> =
        (0..2).flat_map(|k| [0.0, 3.0, 9.5, 21.0].into_iter().map(move |t| Query { track: k, t })).collect();
    let rows: Vec<_> = (0..8).map(|q| &noises[q / 4]).collect();
    let noise = stack_noise(&rows).unwrap();
    let dec_params = dec.params.clone();
    check_graph("styleinv_path", &model.params, |_| true, COMPONENT_TOL, |g, b| {
        let bd = dec_params.bind_all(g, false);
        let f = g.constant(first.clone());
        let w = g.constant(w0.clone());
        let lv = model.latents_graph(g, b, f, w, &tracks, &queries).unwrap();
        let img = dec.synthesis_graph(g, &bd, lv.latents, Some(&noise), None).unwrap();
        contract(g, img, 803)
    })
}

/// The full encoder-side objective `loss_G + λ_L2·recon + λ_reg·reg`.
fn end_to_end_report() -> GradReport {
    let mut t = tiny_trainer(Ablation::Full, 901);
    t.config.ada_enabled = false;
    let clips: Vec<_> = (0..2).map(|_| t.sample_fake().unwrap()).collect();
    let (analytic, _, _) = t.encoder_objective(&clips).unwrap();
    let store = t.model.params.clone();
    check_named("end_to_end_objective", &store, &analytic, |_| true, END_TO_END_TOL, |s| {
        t.model.params = s.clone();
        t.encoder_objective(&clips).unwrap().1[0]
    })
}

/// Every component check, in a fixed order.
pub fn gradient_suite() -> Vec<GradReport> {
    vec![
        decoder_report(),
        ape_report(),
        style_report(),
        encoder_report(),
        video_disc_report(),
        image_disc_report(),
        r1_report(),
        styleinv_path_report(),
        end_to_end_report(),
    ]
}

/// Same names, shapes and bit patterns.
pub fn stores_bit_eq<T: Scalar + styleinv::tensor::BitRepr>(a: &ParamStore<T>, b: &ParamStore<T>) -> bool {
    a.len() == b.len() && a.iter().all(|(n, t)| b.get(n).is_some_and(|u| t.bit_eq(u)))
}

/// `D(x) = ⟨a, vec(x)⟩` per sample; its input gradient is `a` everywhere.
pub struct LinearCritic {
    pub frames: usize,
}

impl Critic for LinearCritic {
    fn frames(&self) -> usize {
        self.frames
    }

    fn logits_graph<S: Scalar>(&self, g: &mut Graph<S>, b: &Bound, frames: Var, _deltas: &[f64]) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        let per_sample = shape.iter().product::<usize>() / shape[0] * self.frames;
        let flat = g.reshape(frames, &[shape[0] / self.frames, per_sample])?;
        g.linear(flat, b.var("lin.a"), None)
    }
}

