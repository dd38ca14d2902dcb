//! End-to-end stages driven by a [`RunConfig`], shared by the command-line
//! tool and the acceptance harness. Everything here runs in `f32`.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::CheckpointBundle;
use crate::config::RunConfig;
use crate::data::{color_remap, SyntheticDataset};
use crate::decoder::LatentDecoder;
use crate::discriminator::{ImageDiscriminator, VideoDiscriminator};
use crate::encoder::{InversionEncoder, StyleInv};
use crate::error::{Error, Result};
use crate::eval::{self, FeatureExtractor, MetricReport};
use crate::generate::{GenerateRequest, VideoGenerator};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::training::{ImageGanTrainer, InversionTrainer, MetricsRow, SparseTrainer};
use crate::transfer::StyleFinetuner;

pub const KIND_DECODER: &str = "decoder";
pub const KIND_INVERSION: &str = "inversion_encoder";
pub const KIND_STYLEINV: &str = "styleinv";

/// Writes every `every`-th row (and the last) to `out`.
pub fn report_rows(out: &mut dyn Write, rows: &[MetricsRow], every: usize) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if every > 0 && (r.step % every == 0 || i + 1 == rows.len()) {
            writeln!(out, "{r}")?;
        }
    }
    Ok(())
}

pub fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    SyntheticDataset::generate(cfg.data_seed, cfg.data_videos, cfg.resolution, cfg.data_length)
}

/// Trained decoder together with its image critic.
pub struct GanStage {
    pub decoder: LatentDecoder<f32>,
    pub critic: ImageDiscriminator,
    pub d_params: ParamStore<f32>,
    pub log: Vec<MetricsRow>,
}

pub fn pretrain_gan(cfg: &RunConfig, steps: usize) -> Result<GanStage> {
    let decoder = LatentDecoder::new(cfg.decoder_config(), cfg.stage_seed(10))?;
    let critic = ImageDiscriminator::new(cfg.disc_config(1))?;
    let d_params = critic.init_params(cfg.stage_seed(11));
    let mut t = ImageGanTrainer::new(cfg.gan_config(), decoder, critic, d_params, dataset(cfg)?)?;
    t.train(steps)?;
    let log = std::mem::take(&mut t.log);
    let (critic, d_params) = (t.critic.clone(), t.d_params.clone());
    let decoder = t.finish(cfg.gan_w_avg_samples)?;
    Ok(GanStage { decoder, critic, d_params, log })
}

pub fn decoder_bundle(cfg: &RunConfig, decoder: &LatentDecoder<f32>, d_params: Option<&ParamStore<f32>>) -> CheckpointBundle {
    let mut b = CheckpointBundle::new(KIND_DECODER, cfg.to_map());
    b.add(&decoder.params);
    b.add_tensor("w_avg", &Tensor::new(&[decoder.w_avg.len()], decoder.w_avg.clone()).expect("vector"));
    if let Some(d) = d_params {
        b.add(d);
    }
    b.extra.insert("w_avg_count".into(), decoder.w_avg_count.to_string());
    b
}

fn bundle_config(b: &CheckpointBundle) -> Result<RunConfig> {
    RunConfig::from_map(&b.config).map_err(|e| Error::Checkpoint(format!("{} bundle config: {e}", b.kind)))
}

/// Exactly the tensors of `expected` must be present in `found`.
fn load_exact(dst: &mut ParamStore<f32>, found: &ParamStore<f32>, what: &str) -> Result<()> {
    let missing: Vec<&str> = dst.names().filter(|n| !found.contains(n)).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("{what}: missing tensors {}", missing.join(", "))));
    }
    dst.load_from(found)
}

pub fn decoder_from_bundle(b: &CheckpointBundle) -> Result<(RunConfig, LatentDecoder<f32>, Option<ParamStore<f32>>)> {
    b.expect_kind(KIND_DECODER)?;
    let cfg = bundle_config(b)?;
    let mut decoder = LatentDecoder::new(cfg.decoder_config(), 0)?;
    let mut found = b.select::<f32>("mapping.");
    found.extend(b.select("synthesis."));
    load_exact(&mut decoder.params, &found, "decoder")?;
    decoder.w_avg = b.tensor::<f32>("w_avg")?.into_data();
    if decoder.w_avg.len() != decoder.config.w_dim {
        return Err(Error::Checkpoint("w_avg length differs from w_dim".into()));
    }
    decoder.w_avg_count = b.extra.get("w_avg_count").and_then(|v| v.parse().ok()).unwrap_or(0);
    let d = b.select::<f32>("dimg.");
    Ok((cfg, decoder, (!d.is_empty()).then_some(d)))
}

pub fn pretrain_inversion(cfg: &RunConfig, decoder: &LatentDecoder<f32>, steps: usize) -> Result<(InversionEncoder<f32>, Vec<MetricsRow>)> {
    let enc = InversionEncoder::new(cfg.styleinv_config().encoder, cfg.stage_seed(20))?;
    let mut t = InversionTrainer::new(cfg.inversion_config(), decoder.clone(), enc, dataset(cfg)?)?;
    t.train(steps)?;
    Ok((t.encoder, t.log))
}

pub fn inversion_bundle(cfg: &RunConfig, enc: &InversionEncoder<f32>) -> CheckpointBundle {
    let mut b = CheckpointBundle::new(KIND_INVERSION, cfg.to_map());
    b.add(&enc.params);
    b
}

pub fn inversion_from_bundle(b: &CheckpointBundle) -> Result<InversionEncoder<f32>> {
    b.expect_kind(KIND_INVERSION)?;
    let cfg = bundle_config(b)?;
    let mut enc = InversionEncoder::new(cfg.styleinv_config().encoder, 0)?;
    load_exact(&mut enc.params, &b.select("encoder."), "inversion encoder")?;
    Ok(enc)
}

pub struct StyleInvStage {
    pub model: StyleInv<f32>,
    pub critic: VideoDiscriminator,
    pub d_params: ParamStore<f32>,
    pub log: Vec<MetricsRow>,
}

/// Builds the sparse trainer with the encoder initialised from `inversion`.
pub fn styleinv_trainer(
    cfg: &RunConfig,
    decoder: &LatentDecoder<f32>,
    inversion: &InversionEncoder<f32>,
) -> Result<SparseTrainer<f32>> {
    let mut model = StyleInv::new(cfg.styleinv_config(), cfg.stage_seed(30))?;
    model.init_from_inversion(inversion)?;
    let critic = VideoDiscriminator::new(cfg.disc_config(cfg.ablation.critic_frames()))?;
    let d_params = critic.init_params(cfg.stage_seed(31));
    SparseTrainer::new(cfg.train_config(), decoder.clone(), model, critic, d_params, dataset(cfg)?)
}

pub fn train_styleinv(
    cfg: &RunConfig,
    decoder: &LatentDecoder<f32>,
    inversion: &InversionEncoder<f32>,
    steps: usize,
) -> Result<StyleInvStage> {
    let mut t = styleinv_trainer(cfg, decoder, inversion)?;
    t.train(steps)?;
    Ok(StyleInvStage { model: t.model, critic: t.critic, d_params: t.d_params, log: t.log })
}

pub fn styleinv_bundle(cfg: &RunConfig, model: &StyleInv<f32>, d_params: Option<&ParamStore<f32>>) -> CheckpointBundle {
    let mut b = CheckpointBundle::new(KIND_STYLEINV, cfg.to_map());
    b.add(&model.params);
    if let Some(d) = d_params {
        b.add(d);
    }
    b
}

pub fn styleinv_from_bundle(b: &CheckpointBundle) -> Result<(RunConfig, StyleInv<f32>)> {
    b.expect_kind(KIND_STYLEINV)?;
    let cfg = bundle_config(b)?;
    let mut model = StyleInv::new(cfg.styleinv_config(), 0)?;
    let mut found = b.select::<f32>("ape.");
    found.extend(b.select("style."));
    found.extend(b.select("encoder."));
    load_exact(&mut model.params, &found, "styleinv")?;
    Ok((cfg, model))
}

/// Colour-remapped dataset frames used as the style-transfer target.
pub fn style_target(cfg: &RunConfig) -> Result<Vec<Tensor<f32>>> {
    let ds = dataset(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stage_seed(40));
    (0..cfg.transfer_images)
        .map(|_| {
            let (v, t) = ds.sample_frame(&mut rng)?;
            Ok(color_remap(&ds.videos[v].render_frame(t)?).cast())
        })
        .collect()
}

pub fn finetune_style(
    cfg: &RunConfig,
    parent: &LatentDecoder<f32>,
    image_critic: Option<&ParamStore<f32>>,
    inversion: &InversionEncoder<f32>,
    target: Vec<Tensor<f32>>,
    steps: usize,
) -> Result<StyleFinetuner<f32>> {
    let critic = ImageDiscriminator::new(cfg.disc_config(1))?;
    let d_params = image_critic.cloned().unwrap_or_else(|| critic.init_params(cfg.stage_seed(41)));
    let mut t = StyleFinetuner::new(cfg.finetune_config(), parent.clone(), inversion.clone(), critic, d_params, target)?;
    t.train(steps)?;
    Ok(t)
}

pub fn child_bundle(cfg: &RunConfig, ft: &StyleFinetuner<f32>) -> CheckpointBundle {
    let mut b = decoder_bundle(cfg, &ft.child, Some(&ft.d_params));
    b.parent_checksum = Some(ft.parent_checksum.clone());
    b
}

/// Generated clips, one per seed.
pub fn generate_clips(
    decoder: &LatentDecoder<f32>,
    model: &StyleInv<f32>,
    seeds: impl IntoIterator<Item = u64>,
    frames: usize,
    truncation: f64,
) -> Result<Vec<Vec<Tensor<f64>>>> {
    let gen = VideoGenerator::new(decoder, model);
    seeds
        .into_iter()
        .map(|s| {
            let req = GenerateRequest { truncation, ..GenerateRequest::new(s, frames) };
            Ok(gen.generate(&req)?.frames.iter().map(|f| f.cast()).collect())
        })
        .collect()
}

/// Fréchet and temporal metrics of generated clips against dataset clips.
pub fn evaluate(cfg: &RunConfig, decoder: &LatentDecoder<f32>, model: &StyleInv<f32>) -> Result<MetricReport> {
    let ds = dataset(cfg)?;
    let frames = cfg.eval_frames.min(cfg.data_length);
    let n = cfg.eval_clips;
    let real: Vec<Vec<Tensor<f64>>> = (0..n).map(|i| ds.clip(i % ds.len(), frames)).collect::<Result<_>>()?;
    let seeds = (0..n as u64).map(|i| cfg.stage_seed(1000 + i));
    let fake = generate_clips(decoder, model, seeds, frames, cfg.truncation)?;
    let mut report = clip_metrics(&real, &fake)?;
    let gen = VideoGenerator::new(decoder, model);
    let ts: Vec<f64> = (0..frames).map(|t| t as f64).collect();
    let mut jump = 0.0;
    for i in 0..n as u64 {
        let (_, lat) = gen.latents_at(&GenerateRequest::new(cfg.stage_seed(1000 + i), frames), &ts)?;
        jump += eval::latent_jump(&lat.iter().map(|w| w.values.iter().map(|&v| v as f64).collect()).collect::<Vec<_>>())?;
    }
    report.insert("latent_jump", jump / n as f64);
    Ok(report)
}

/// `fid_proxy`, `fvd16_proxy`, `fvd128_proxy` (when clips are long enough)
/// and the mean identity drift of `fake`.
pub fn clip_metrics(real: &[Vec<Tensor<f64>>], fake: &[Vec<Tensor<f64>>]) -> Result<MetricReport> {
    let ext = FeatureExtractor::standard(real[0][0].shape()[0]);
    let rf: Vec<&Tensor<f64>> = real.iter().flatten().collect();
    let ff: Vec<&Tensor<f64>> = fake.iter().flatten().collect();
    let mut report = MetricReport::default();
    report.insert("fid_proxy", eval::fid_proxy(&ext, &rf, &ff)?);
    let len = real.iter().chain(fake).map(Vec::len).min().unwrap_or(0);
    for l in [16, 128] {
        if len >= l {
            report.insert(format!("fvd{l}_proxy"), eval::fvd_proxy(&ext, real, fake, l)?);
        }
    }
    let drift: f64 = fake.iter().map(|c| eval::identity_drift(&ext, c)).sum::<Result<f64>>()?;
    report.insert("identity_drift", drift / fake.len() as f64);
    Ok(report)
}
