//! Acceptance harness: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.
//!
//! Criterion 7 trains the whole desk pipeline at 64×64 (about an hour on one
//! CPU core). Its checkpoints are cached under the cargo target directory,
//! keyed by the desk config and the library sources, so an unchanged tree
//! reuses them. `STYLEINV_ACCEPTANCE_FRESH=1` retrains regardless and
//! `STYLEINV_ACCEPTANCE_ONLY=1,4,9` runs a subset.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use styleinv::ape::{AnchorTrack, FfaApe};
use styleinv::checkpoint::CheckpointBundle;
use styleinv::config::RunConfig;
use styleinv::decoder::{sample_z, LatentCode, LatentDecoder};
use styleinv::discriminator::r1_penalty;
use styleinv::encoder::{InversionEncoder, StyleInv};
use styleinv::eval::{frechet_distance, latent_jump};
use styleinv::generate::{GenerateRequest, VideoGenerator};
use styleinv::nn::{Init, ParamStore};
use styleinv::pipeline;
use styleinv::tensor::Tensor;
use styleinv::training::{adversarial_losses, recon_loss, Ablation};
use styleinv::transfer::transfer_video;

// Tolerances and limits.
const APE_ANCHOR_TOL: f64 = 1e-6;
const APE_ANCHORS: i64 = 1000;
const LIPSCHITZ_EPS: f64 = 1e-3;
/// Rounding in the two f64 evaluations; the analytic bound itself is tight.
const LIPSCHITZ_SLACK: f64 = 1e-12;
const ORACLE_TOL: f64 = 1e-6;
const IMPROVEMENT_FACTOR: f64 = 5.0;
const RECON_ABLATION_FACTOR: f64 = 3.0;
const JUMP_ABLATION_FACTOR: f64 = 2.0;
const RECON_MATCH_FACTOR: f64 = 1.5;
const EVAL_SEEDS: u64 = 16;
const JUMP_FRAMES: usize = 32;
const SHARED_LATENTS: u64 = 100;

/// The 64×64 desk run. Everything not listed keeps its default.
const DESK: &str = "\
seed = 0
gan.steps = 2000
inv.steps = 500
train.steps = 400
transfer.steps = 100
eval.clips = 16
eval.frames = 32
";

/// 16×16 model used where only determinism and file handling matter.
const SMALL: &str = "\
seed = 9
data.videos = 4
data.length = 24
model.resolution = 16
model.z_dim = 8
model.w_dim = 8
model.channel_base = 64
model.channel_max = 4
model.mapping_layers = 2
model.layers_per_block = 1
model.style_dim = 8
model.anchor_distance = 8
disc.channel_max = 4
disc.feature_dim = 8
transfer.freeze_res = 8
";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn within(secs: f64, limit: f64) -> (bool, String) {
    (secs < limit, format!("runtime {secs:.2} s < {limit} s"))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mse(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.numel() as f64
}

fn latent_f64(w: &LatentCode<f32>) -> Vec<f64> {
    w.values.iter().map(|&v| v as f64).collect()
}

/// Replaces every tensor accepted by `pick` with N(0, std²) draws.
fn scramble(store: &mut ParamStore<f32>, pick: impl Fn(&str) -> bool, seed: u64, std: f64) {
    let mut init = Init::new(seed);
    let names: Vec<String> = store.names().filter(|n| pick(n)).map(str::to_owned).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.insert(n, init.normal(&shape, std));
    }
}

/// Models whose zero-initialised tensors carry random values, so that every
/// path from the positional code to the output is live.
fn live_models(cfg: &RunConfig) -> (LatentDecoder<f32>, StyleInv<f32>) {
    let mut dec = LatentDecoder::new(cfg.decoder_config(), 1).unwrap();
    scramble(&mut dec.params, |n| n.ends_with("noise_strength"), 2, 0.3);
    let mut model = StyleInv::new(cfg.styleinv_config(), 3).unwrap();
    scramble(&mut model.params, |n| n.starts_with("style.site") || n.starts_with("encoder.out") || n == "ape.interp_s", 4, 0.3);
    (dec, model)
}

// 1 ---------------------------------------------------------------------------

fn fixedness() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::parse(DESK).unwrap();
    let ape = FfaApe::new(cfg.styleinv_config().ape).unwrap();
    let mut params = ParamStore::<f32>::new();
    ape.add_params(&mut params, &mut Init::new(1));
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let patterns: BTreeSet<Vec<u32>> = (0..100)
        .map(|_| ape.encode(&params, &AnchorTrack::new(rng.random()), 0.0).unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    let (fast, time) = within(t.elapsed().as_secs_f64(), 1.0);
    outcome(patterns.len() == 1 && fast, format!("{} distinct bit patterns over 100 video seeds; {time}", patterns.len()))
}

// 2 ---------------------------------------------------------------------------

fn anchors_and_continuity() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::parse(DESK).unwrap();
    let ape = FfaApe::new(cfg.styleinv_config().ape).unwrap();
    let delta = ape.config.anchor_distance;
    let mut params = ParamStore::<f64>::new();
    ape.add_params(&mut params, &mut Init::new(2));
    common::randomize(&mut params, |n| n == "ape.interp_s", 3, 1.5);
    let track = AnchorTrack::new(0xA11CE);

    let ts: Vec<f64> = (0..=APE_ANCHORS).map(|i| i as f64 * delta).collect();
    let codes = ape.encode_many(&params, &track, &ts).unwrap();
    let tokens: Vec<Vec<f64>> = (0..=APE_ANCHORS + 1).map(|i| ape.token(&params, &track, i).unwrap()).collect();
    let anchor_err = (0..=APE_ANCHORS as usize).map(|i| max_abs(codes.row(i), &tokens[i])).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut worst_ratio = 0.0f64;
    let mut violations = 0;
    for _ in 0..1000 {
        let t0 = rng.random_range(0.0..(APE_ANCHORS as f64 * delta));
        let v = ape.encode_many(&params, &track, &[t0, t0 + LIPSCHITZ_EPS]).unwrap();
        let change = max_abs(v.row(0), v.row(1));
        let (i0, _) = ape.config.segment(t0).unwrap();
        let (i1, _) = ape.config.segment(t0 + LIPSCHITZ_EPS).unwrap();
        let step = (i0..=i1)
            .map(|i| max_abs(&tokens[i as usize], &tokens[i as usize + 1]))
            .fold(0.0, f64::max);
        let bound = 2.0 * LIPSCHITZ_EPS / delta * step;
        worst_ratio = worst_ratio.max(change / bound);
        violations += usize::from(change > bound + LIPSCHITZ_SLACK);
    }
    let (fast, time) = within(t.elapsed().as_secs_f64(), 10.0);
    outcome(
        anchor_err <= APE_ANCHOR_TOL && violations == 0 && fast,
        format!(
            "max anchor error {anchor_err:.2e} (tol {APE_ANCHOR_TOL:.0e}) over {} anchors; \
             {violations} Lipschitz violations over 1000 t, worst change/bound {worst_ratio:.3}; {time}",
            APE_ANCHORS + 1
        ),
    )
}

// 3 ---------------------------------------------------------------------------

fn residual_identity() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::parse(DESK).unwrap();
    let (dec, mut model) = live_models(&cfg);
    let names: Vec<String> = model.params.names().filter(|n| n.starts_with("encoder.out")).map(str::to_owned).collect();
    for n in names {
        let shape = model.params.get(&n).unwrap().shape().to_vec();
        model.params.insert(n, Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let mut mismatches = 0;
    for _ in 0..100 {
        let seed: u64 = rng.random();
        let w0 = dec.map_latent(&sample_z(seed, 0, cfg.z_dim), 1.0).unwrap();
        let time = rng.random_range(0.0..10_000.0);
        let noise = dec.sample_video_noise(seed);
        let w = model.styleinv(&dec, &w0, time, &AnchorTrack::new(rng.random()), Some(&noise)).unwrap();
        mismatches += usize::from(!w.to_tensor().bit_eq(&w0.to_tensor()));
    }
    let (fast, time) = within(t.elapsed().as_secs_f64(), 5.0);
    outcome(mismatches == 0 && fast, format!("{mismatches}/100 latents differ from w0 in any bit (64x64 model); {time}"))
}

// 4 ---------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = common::gradient_suite();
    for r in &reports {
        println!("       {}", r.summary());
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.component).collect();
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    let (fast, time) = within(t.elapsed().as_secs_f64(), 60.0);
    outcome(
        failed.is_empty() && fast,
        format!("{checked} gradient components over {} parts, failing: {failed:?}; {time}", reports.len()),
    )
}

// 5 ---------------------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let mut notes = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        let ok = (got - want).abs() <= ORACLE_TOL;
        notes.push(format!("{name} {got:.9} vs {want:.9}{}", if ok { "" } else { " !" }));
        ok
    };
    let ln2 = std::f64::consts::LN_2;
    let (d, g) = adversarial_losses(&[0.0f64; 4], &[0.0f64; 4]);
    let mut ok = check("loss_D(0)", d, 2.0 * ln2) & check("loss_G(0)", g, ln2);

    let a = Tensor::full(&[3, 8, 8], 0.75f64);
    let b = Tensor::full(&[3, 8, 8], 0.25f64);
    ok &= check("recon(offset 0.5)", recon_loss(&a, &b).unwrap(), 0.25);

    let critic = common::LinearCritic { frames: 4 };
    let dim = 4 * 3 * 8 * 8;
    let mut params = ParamStore::new();
    params.insert("lin.a", common::coefficients(&[1, dim], 51));
    let norm2: f64 = params.get("lin.a").unwrap().data().iter().map(|v| v * v).sum();
    let frames = common::coefficients(&[8, 3, 8, 8], 52);
    ok &= check("R1(linear)", r1_penalty(&critic, &params, &frames, &[], 10.0).unwrap(), 5.0 * norm2);

    let i3 = DMatrix::<f64>::identity(3, 3);
    let mu = [0.3, -1.0, 2.0];
    ok &= check("frechet(identical)", frechet_distance(&mu, &i3, &mu, &i3).unwrap(), 0.0);
    let shifted = [1.3, 1.0, 0.0];
    ok &= check("frechet(shift)", frechet_distance(&mu, &i3, &shifted, &i3).unwrap(), 1.0 + 4.0 + 4.0);
    let (four, one) = (DMatrix::from_element(1, 1, 4.0), DMatrix::from_element(1, 1, 1.0));
    ok &= check("frechet(1-d 4 vs 1)", frechet_distance(&[0.0], &four, &[0.0], &one).unwrap(), 1.0);
    outcome(ok, format!("tol {ORACLE_TOL:.0e}: {}", notes.join("; ")))
}

// 6 ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let cfg = RunConfig::parse(SMALL).unwrap();
    let (dec, model) = live_models(&cfg);
    let gen = VideoGenerator::new(&dec, &model);
    let req = GenerateRequest::new(77, 10_001);
    let sweep = gen.generate(&req).unwrap();
    let mut same = Vec::new();
    for k in [0usize, 500, 10_000] {
        let alone = gen.frame_at(&req, k).unwrap();
        same.push((k, alone.bit_eq(&sweep.frames[k])));
    }
    let frames_ok = same.iter().all(|(_, s)| *s);

    let run = || {
        let mut tr = common::tiny_trainer(Ablation::Full, 61);
        tr.train(100).unwrap();
        tr.log
    };
    let (a, b) = (run(), run());
    let logs_ok = a == b && a.len() == 100;
    outcome(
        frames_ok && logs_ok,
        format!("isolated vs sweep bitwise {same:?}; two 100-step logs identical: {logs_ok}"),
    )
}

// 7 ---------------------------------------------------------------------------

struct Desk {
    cfg: RunConfig,
    decoder: LatentDecoder<f32>,
    d_img: ParamStore<f32>,
    inversion: InversionEncoder<f32>,
    models: BTreeMap<&'static str, StyleInv<f32>>,
    source: String,
}

const VARIANTS: [Ablation; 4] = [Ablation::Full, Ablation::NoReconNoFirstFrame, Ablation::NoFirstFrame, Ablation::NoApe];

fn variant_name(a: Ablation) -> &'static str {
    match a {
        Ablation::Full => "full",
        Ablation::NoReconNoFirstFrame => "no_recon_no_first_frame",
        Ablation::NoFirstFrame => "no_first_frame",
        Ablation::NoApe => "no_ape",
    }
}

fn source_key() -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut files = Vec::new();
    walk(&root.join("src"), &mut files);
    files.sort();
    let mut h = Sha256::new();
    h.update(DESK.as_bytes());
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn stage<T>(path: &Path, fresh: bool, load: impl Fn(&CheckpointBundle) -> T, train: impl FnOnce() -> CheckpointBundle) -> (T, bool) {
    if !fresh && path.exists() {
        if let Ok(b) = CheckpointBundle::load(path) {
            return (load(&b), true);
        }
    }
    let b = train();
    b.save(path).unwrap();
    (load(&b), false)
}

fn desk() -> Desk {
    let cfg = RunConfig::parse(DESK).unwrap();
    let fresh = std::env::var("STYLEINV_ACCEPTANCE_FRESH").is_ok_and(|v| v == "1");
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-{}", source_key()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut cached = Vec::new();
    let clock = Instant::now();
    let note = |what: &str, hit: bool| {
        eprintln!("  [desk] {what}: {} at {:.0} s", if hit { "cached" } else { "trained" }, clock.elapsed().as_secs_f64());
    };

    let ((decoder, d_img), hit) = stage(
        &dir.join("decoder.ckpt"),
        fresh,
        |b| {
            let (_, d, p) = pipeline::decoder_from_bundle(b).unwrap();
            (d, p.unwrap())
        },
        || {
            let s = pipeline::pretrain_gan(&cfg, cfg.gan_steps).unwrap();
            pipeline::decoder_bundle(&cfg, &s.decoder, Some(&s.d_params))
        },
    );
    note("image GAN", hit);
    cached.push(hit);

    let (inversion, hit) = stage(
        &dir.join("inversion.ckpt"),
        fresh,
        |b| pipeline::inversion_from_bundle(b).unwrap(),
        || pipeline::inversion_bundle(&cfg, &pipeline::pretrain_inversion(&cfg, &decoder, cfg.inv_steps).unwrap().0),
    );
    note("inversion encoder", hit);
    cached.push(hit);

    let mut models = BTreeMap::new();
    for a in VARIANTS {
        let vcfg = RunConfig { ablation: a, ..cfg.clone() };
        let (m, hit) = stage(
            &dir.join(format!("styleinv_{}.ckpt", variant_name(a))),
            fresh,
            |b| pipeline::styleinv_from_bundle(b).unwrap().1,
            || {
                let s = pipeline::train_styleinv(&vcfg, &decoder, &inversion, vcfg.train_steps).unwrap();
                let last = s.log.last().map(|r| r.to_string()).unwrap_or_default();
                eprintln!("  [desk] {a} last row: {last}");
                pipeline::styleinv_bundle(&vcfg, &s.model, Some(&s.d_params))
            },
        );
        note(&format!("styleinv {a}"), hit);
        cached.push(hit);
        models.insert(variant_name(a), m);
    }
    let source = if cached.iter().all(|&h| h) {
        format!("cached checkpoints in {}", dir.display())
    } else {
        format!("trained in {:.0} s", clock.elapsed().as_secs_f64())
    };
    Desk { cfg, decoder, d_img, inversion, models, source }
}

/// Mean per-pixel `‖G(styleinv(w0, 0)) − G(w0)‖²` for each `(w0 seed, track seed)`.
fn first_frame_errors(dec: &LatentDecoder<f32>, model: &StyleInv<f32>, pairs: &[(u64, u64)]) -> Vec<f64> {
    let gen = VideoGenerator::new(dec, model);
    pairs
        .iter()
        .map(|&(s, track)| {
            let w0 = gen.first_latent(&GenerateRequest::new(s, 1)).unwrap();
            let noise = gen.video_noise(s);
            let w = model.styleinv(dec, &w0, 0.0, &AnchorTrack::new(track), noise.as_ref()).unwrap();
            mse(&dec.synthesize(&w, noise.as_ref()).unwrap(), &dec.synthesize(&w0, noise.as_ref()).unwrap())
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance from pairwise differences: exactly zero when every
/// value is bitwise equal, which the mean-subtracting form does not guarantee.
fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    v.iter().flat_map(|a| v.iter().map(move |b| (a - b).powi(2))).sum::<f64>() / (2.0 * n * n)
}

struct VariantMetrics {
    recon: f64,
    jump: f64,
    recon_var: f64,
}

fn variant_metrics(d: &Desk, name: &str) -> VariantMetrics {
    let model = &d.models[name];
    let seeds: Vec<u64> = (0..EVAL_SEEDS).map(|i| d.cfg.stage_seed(1000 + i)).collect();
    let recon = mean(&first_frame_errors(&d.decoder, model, &seeds.iter().map(|&s| (s, s)).collect::<Vec<_>>()));
    let gen = VideoGenerator::new(&d.decoder, model);
    let ts: Vec<f64> = (0..JUMP_FRAMES).map(|t| t as f64).collect();
    let jumps: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            let (_, lat) = gen.latents_at(&GenerateRequest::new(s, JUMP_FRAMES), &ts).unwrap();
            latent_jump(&lat.iter().map(latent_f64).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    // One w0 and one noise realization; only the positional-code seed varies.
    let fixed = seeds[0];
    let pairs: Vec<(u64, u64)> = (0..EVAL_SEEDS).map(|k| (fixed, d.cfg.stage_seed(2000 + k))).collect();
    let recon_var = variance(&first_frame_errors(&d.decoder, model, &pairs));
    VariantMetrics { recon, jump: mean(&jumps), recon_var }
}

fn reference_run() -> BTreeMap<String, f64> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/reference_run.txt");
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').and_then(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?))))
        .collect()
}

fn desk_run(d: &Desk) -> Vec<(&'static str, &'static str, Outcome)> {
    let mut out = Vec::new();
    println!("       desk artifacts: {}", d.source);
    let m: BTreeMap<&str, VariantMetrics> = VARIANTS.iter().map(|&a| (variant_name(a), variant_metrics(d, variant_name(a)))).collect();
    for (k, v) in &m {
        println!("       {k}: frame-0 recon {:.4e}, latent_jump {:.4}, recon variance over code seeds {:.3e}", v.recon, v.jump, v.recon_var);
    }
    let full = &m["full"];

    let reference = reference_run();
    let a = match (reference.get("full.recon"), reference.get("threshold_factor")) {
        (Some(r), Some(f)) => {
            let threshold = r * f;
            outcome(full.recon <= threshold, format!("full frame-0 recon {:.4e} <= {threshold:.4e} (reference {r:.4e} x {f})", full.recon))
        }
        _ => outcome(false, format!("no reference value recorded; this run measured {:.6e}", full.recon)),
    };
    out.push(("7a", "first-frame reconstruction below reference threshold", a));

    let trained = pipeline::evaluate(&d.cfg, &d.decoder, &d.models["full"]).unwrap();
    let raw_dec = LatentDecoder::new(d.cfg.decoder_config(), d.cfg.stage_seed(10)).unwrap();
    let raw_model = StyleInv::new(d.cfg.styleinv_config(), d.cfg.stage_seed(30)).unwrap();
    let untrained = pipeline::evaluate(&d.cfg, &raw_dec, &raw_model).unwrap();
    let ratio = |k: &str| untrained.values[k] / trained.values[k];
    let (rf, rv) = (ratio("fid_proxy"), ratio("fvd16_proxy"));
    out.push((
        "7b",
        "trained beats untrained on fid/fvd16 proxies",
        outcome(
            rf >= IMPROVEMENT_FACTOR && rv >= IMPROVEMENT_FACTOR,
            format!(
                "fid {:.3} -> {:.3} ({rf:.1}x), fvd16 {:.3} -> {:.3} ({rv:.1}x), need {IMPROVEMENT_FACTOR}x",
                untrained.values["fid_proxy"], trained.values["fid_proxy"], untrained.values["fvd16_proxy"], trained.values["fvd16_proxy"]
            ),
        ),
    ));

    let nr = &m["no_recon_no_first_frame"];
    let r1 = nr.recon / full.recon;
    out.push((
        "7c.1",
        "without recon loss and first-frame critic: recon error grows",
        outcome(r1 >= RECON_ABLATION_FACTOR, format!("recon {:.4e} vs full {:.4e} = {r1:.2}x, need {RECON_ABLATION_FACTOR}x", nr.recon, full.recon)),
    ));

    let nf = &m["no_first_frame"];
    let rj = nf.jump / full.jump;
    let rr = nf.recon / full.recon;
    let matched = rr <= RECON_MATCH_FACTOR && rr >= 1.0 / RECON_MATCH_FACTOR;
    out.push((
        "7c.2",
        "without first-frame critic: first-step latent jump grows",
        outcome(
            rj >= JUMP_ABLATION_FACTOR && matched,
            format!(
                "latent_jump {:.3} vs full {:.3} = {rj:.2}x (need {JUMP_ABLATION_FACTOR}x); recon ratio {rr:.2} (need within {RECON_MATCH_FACTOR}x)",
                nf.jump, full.jump
            ),
        ),
    ));

    let na = &m["no_ape"];
    out.push((
        "7c.3",
        "acyclic encoding: first frame depends on the code seed",
        outcome(na.recon_var > 0.0 && full.recon_var == 0.0, format!("recon variance no_ape {:.3e}, full {:e}", na.recon_var, full.recon_var)),
    ));
    out
}

// 8 ---------------------------------------------------------------------------

fn style_transfer(d: &Desk) -> Outcome {
    let t = Instant::now();
    let cfg = &d.cfg;
    let target = pipeline::style_target(cfg).unwrap();
    let ft = pipeline::finetune_style(cfg, &d.decoder, Some(&d.d_img), &d.inversion, target, cfg.transfer_steps).unwrap();
    let changed = ft.changed_frozen();

    let frozen_res: Vec<bool> = cfg.decoder_config().resolutions().iter().map(|&r| r <= cfg.freeze_res).collect();
    let mut tap_mismatch = 0;
    let mut free_moved = false;
    for chunk in (0..SHARED_LATENTS).collect::<Vec<_>>().chunks(10) {
        let ws: Vec<LatentCode<f32>> =
            chunk.iter().map(|&s| ft.parent.map_latent(&sample_z(5000 + s, 0, cfg.z_dim), 1.0).unwrap()).collect();
        let noise: Vec<_> = chunk.iter().map(|&s| ft.parent.sample_video_noise(5000 + s)).collect();
        let (_, tp) = ft.parent.synthesize_with_taps(&ws, Some(&noise)).unwrap();
        let (_, tc) = ft.child.synthesize_with_taps(&ws, Some(&noise)).unwrap();
        for ((a, b), &frozen) in tp.iter().zip(&tc).zip(&frozen_res) {
            if frozen {
                tap_mismatch += usize::from(!a.bit_eq(b));
            } else {
                free_moved |= !a.bit_eq(b);
            }
        }
    }

    let gen = VideoGenerator::new(&ft.parent, &d.models["full"]);
    let req = GenerateRequest::new(cfg.stage_seed(4000), 16);
    let ts = req.timestamps();
    let (_, lat_a) = gen.latents_at(&req, &ts).unwrap();
    let (_, lat_b) = gen.latents_at(&req, &ts).unwrap();
    let same_traj = lat_a.iter().zip(&lat_b).all(|(x, y)| x.to_tensor().bit_eq(&y.to_tensor()));
    let noise = gen.video_noise(req.seed);
    let va = transfer_video(&ft.parent, &lat_a, noise.as_ref()).unwrap();
    let vb = transfer_video(&ft.child, &lat_b, noise.as_ref()).unwrap();
    let pixel: f64 = va.iter().zip(&vb).map(|(a, b)| mse(a, b)).sum::<f64>() / va.len() as f64;

    let (fast, time) = within(t.elapsed().as_secs_f64(), 900.0);
    outcome(
        changed.is_empty() && tap_mismatch == 0 && free_moved && same_traj && pixel > 0.0 && fast,
        format!(
            "{} frozen tensors, {} changed; {tap_mismatch} frozen-tier activation mismatches over {SHARED_LATENTS} latents; \
             unfrozen tiers moved: {free_moved}; shared trajectory identical: {same_traj}; parent/child pixel mse {pixel:.4e}; {time}",
            ft.frozen.len(),
            changed.len()
        ),
    )
}

// 9 ---------------------------------------------------------------------------

fn round_trips_and_cli() -> Outcome {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut ok = true;

    for text in [DESK, SMALL] {
        let cfg = RunConfig::parse(text).unwrap();
        ok &= RunConfig::parse(&cfg.to_text()).unwrap() == cfg;
    }
    notes.push(format!("config text round trip: {ok}"));

    let cfg = RunConfig::parse(SMALL).unwrap();
    let (dec, model) = live_models(&cfg);
    let dec_bytes = pipeline::decoder_bundle(&cfg, &dec, None).to_bytes();
    let back = CheckpointBundle::from_bytes(&dec_bytes).unwrap();
    let (_, dec2, _) = pipeline::decoder_from_bundle(&back).unwrap();
    let model_b = pipeline::styleinv_bundle(&cfg, &model, None);
    let (_, model2) = pipeline::styleinv_from_bundle(&CheckpointBundle::from_bytes(&model_b.to_bytes()).unwrap()).unwrap();
    let req = GenerateRequest::new(3, 6);
    let v1 = VideoGenerator::new(&dec, &model).generate(&req).unwrap();
    let v2 = VideoGenerator::new(&dec2, &model2).generate(&req).unwrap();
    let ckpt_ok = back.to_bytes() == dec_bytes && v1.frames.iter().zip(&v2.frames).all(|(a, b)| a.bit_eq(b));
    notes.push(format!("checkpoint bytes and forward bitwise: {ckpt_ok}"));
    ok &= ckpt_ok;

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let good_cfg = write("good.cfg", &format!("{SMALL}gan.steps = 1\ngan.batch = 2\nout_dir = {}\n", dir.join("run").display()));
    let malformed = write("bad.cfg", "seed 3\n");
    let odd_res = write("res.cfg", &format!("{SMALL}").replace("model.resolution = 16", "model.resolution = 48"));
    let dec_path = dir.join("decoder.ckpt");
    let sinv_path = dir.join("styleinv.ckpt");
    let inv_path = dir.join("inversion.ckpt");
    pipeline::decoder_bundle(&cfg, &dec, None).save(&dec_path).unwrap();
    model_b.save(&sinv_path).unwrap();
    let inv = InversionEncoder::<f32>::new(cfg.styleinv_config().encoder, 1).unwrap();
    pipeline::inversion_bundle(&cfg, &inv).save(&inv_path).unwrap();
    let corrupt = dir.join("corrupt.ckpt");
    let mut bytes = dec_bytes.clone();
    let n = bytes.len();
    bytes[n - 1] ^= 0x10;
    std::fs::write(&corrupt, bytes).unwrap();

    let exe = env!("CARGO_BIN_EXE_styleinv");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let run = |args: Vec<String>, env_seed: Option<&str>| {
        let mut c = Command::new(exe);
        c.args(&args).env_remove("STYLEINV_SEED");
        if let Some(s) = env_seed {
            c.env("STYLEINV_SEED", s);
        }
        c.output().unwrap().status.code().unwrap_or(-1)
    };
    let gen_args = |d: &Path, m: &Path, out: &str| {
        vec!["generate".into(), "--decoder".into(), p(d), "--styleinv".into(), p(m), "--frames".into(), "3".into(), "--out".into(), p(&dir.join(out))]
    };
    let cases: Vec<(&str, Vec<String>, Option<&str>, i32)> = vec![
        ("missing config", vec!["pretrain-gan".into(), "--config".into(), p(&dir.join("none.cfg"))], None, 2),
        ("malformed config", vec!["pretrain-gan".into(), "--config".into(), p(&malformed)], None, 2),
        ("resolution 48", vec!["pretrain-gan".into(), "--config".into(), p(&odd_res)], None, 2),
        ("bad STYLEINV_SEED", vec!["pretrain-gan".into(), "--config".into(), p(&good_cfg)], Some("x1"), 2),
        ("missing checkpoint", gen_args(&dir.join("none.ckpt"), &sinv_path, "o1"), None, 3),
        ("corrupt checkpoint", gen_args(&corrupt, &sinv_path, "o2"), None, 3),
        ("wrong checkpoint kind", gen_args(&inv_path, &sinv_path, "o3"), None, 3),
        ("valid generate", gen_args(&dec_path, &sinv_path, "o4"), None, 0),
    ];
    let mut codes = Vec::new();
    for (name, args, env_seed, want) in cases {
        let got = run(args, env_seed);
        ok &= got == want;
        codes.push(format!("{name}={got}{}", if got == want { String::new() } else { format!(" (want {want})") }));
    }
    notes.push(format!("exit codes [{}]", codes.join(", ")));
    let (fast, time) = within(t.elapsed().as_secs_f64(), 10.0);
    notes.push(time);
    outcome(ok && fast, notes.join("; "))
}

// -----------------------------------------------------------------------------

fn report(id: &str, name: &str, secs: f64, o: &Outcome) {
    println!("{} {id:<5} {name} [{secs:.1} s]: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<String>> =
        std::env::var("STYLEINV_ACCEPTANCE_ONLY").ok().map(|v| v.split(',').map(|s| s.trim().to_string()).collect());
    let wanted = |id: &str| only.as_ref().is_none_or(|o| o.contains(id));
    let mut failures = 0;
    let mut ran = 0;

    let simple: [(&str, &str, fn() -> Outcome); 6] = [
        ("1", "first code is fixed across videos", fixedness),
        ("2", "anchor consistency and Lipschitz continuity", anchors_and_continuity),
        ("3", "zeroed projection gives styleinv = w0", residual_identity),
        ("4", "gradient suite", gradients),
        ("5", "loss-value oracles", loss_oracles),
        ("6", "random access and training determinism", determinism),
    ];
    for (id, name, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            let o = f();
            report(id, name, t.elapsed().as_secs_f64(), &o);
            failures += usize::from(!o.pass);
            ran += 1;
        }
    }

    if wanted("7") || wanted("8") {
        let d = desk();
        if wanted("7") {
            let t = Instant::now();
            let rows = desk_run(&d);
            let secs = t.elapsed().as_secs_f64();
            for (id, name, o) in rows {
                report(id, name, secs, &o);
                failures += usize::from(!o.pass);
                ran += 1;
            }
        }
        if wanted("8") {
            let t = Instant::now();
            let o = style_transfer(&d);
            report("8", "style transfer keeps the frozen tier", t.elapsed().as_secs_f64(), &o);
            failures += usize::from(!o.pass);
            ran += 1;
        }
    }

    if wanted("9") {
        let t = Instant::now();
        let o = round_trips_and_cli();
        report("9", "round trips and exit codes", t.elapsed().as_secs_f64(), &o);
        failures += usize::from(!o.pass);
        ran += 1;
    }

    println!("acceptance: {} of {ran} criteria passed", ran - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
