use styleinv::ape::AnchorTrack;
use styleinv::checkpoint::CheckpointBundle;
use styleinv::config::RunConfig;
use styleinv::decoder::{sample_z, LatentDecoder};
use styleinv::encoder::{InversionEncoder, StyleInv};
use styleinv::nn::Init;
use styleinv::pipeline::{
    decoder_bundle, decoder_from_bundle, inversion_bundle, inversion_from_bundle, styleinv_bundle, styleinv_from_bundle,
    KIND_DECODER,
};

fn tiny_config() -> RunConfig {
    RunConfig::parse(
        "model.resolution = 16\nmodel.z_dim = 8\nmodel.w_dim = 8\nmodel.channel_base = 64\nmodel.channel_max = 4\n\
         model.style_dim = 8\nmodel.anchor_distance = 8\ntransfer.freeze_res = 8\nseed = 5\n",
    )
    .unwrap()
}

/// Every tensor replaced by random values so that zero-initialised ones are exercised too.
fn scramble(store: &mut styleinv::nn::ParamStore<f32>, seed: u64) {
    let mut init = Init::new(seed);
    for (_, t) in store.iter_mut() {
        *t = init.normal(t.shape(), 0.2);
    }
}

fn roundtrip(b: &CheckpointBundle) -> CheckpointBundle {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/x.ckpt");
    b.save(&path).unwrap();
    CheckpointBundle::load(&path).unwrap()
}

#[test]
fn decoder_round_trip_renders_identically() {
    let cfg = tiny_config();
    let mut dec = LatentDecoder::<f32>::new(cfg.decoder_config(), 1).unwrap();
    scramble(&mut dec.params, 2);
    dec.estimate_w_avg(3, 16).unwrap();
    let (cfg2, back, d) = decoder_from_bundle(&roundtrip(&decoder_bundle(&cfg, &dec, None))).unwrap();
    assert_eq!(cfg2, cfg);
    assert!(d.is_none());
    assert_eq!(back.w_avg, dec.w_avg);
    let w = dec.map_latent(&sample_z(9, 0, 8), 0.7).unwrap();
    let noise = dec.sample_video_noise(4);
    let a = dec.synthesize(&w, Some(&noise)).unwrap();
    let b = back.synthesize(&back.map_latent(&sample_z(9, 0, 8), 0.7).unwrap(), Some(&noise)).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn styleinv_round_trip_gives_identical_trajectories() {
    let cfg = tiny_config();
    let dec = LatentDecoder::<f32>::new(cfg.decoder_config(), 1).unwrap();
    let mut model = StyleInv::<f32>::new(cfg.styleinv_config(), 6).unwrap();
    scramble(&mut model.params, 7);
    let (cfg2, back) = styleinv_from_bundle(&roundtrip(&styleinv_bundle(&cfg, &model, None))).unwrap();
    assert_eq!(cfg2, cfg);
    let w0 = dec.map_latent(&sample_z(1, 0, 8), 1.0).unwrap();
    let ts: Vec<f64> = (0..40).map(|t| t as f64 * 0.75).collect();
    let noise = dec.sample_video_noise(1);
    let a = model.trajectory(&dec, &w0, &AnchorTrack::new(1), Some(&noise), &ts).unwrap();
    let b = back.trajectory(&dec, &w0, &AnchorTrack::new(1), Some(&noise), &ts).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_tensor().bit_eq(&y.to_tensor())));
}

#[test]
fn inversion_round_trip_and_kind_checks() {
    let cfg = tiny_config();
    let mut enc = InversionEncoder::<f32>::new(styleinv::encoder::EncoderConfig::for_decoder(&cfg.decoder_config()), 8).unwrap();
    scramble(&mut enc.params, 9);
    let bundle = roundtrip(&inversion_bundle(&cfg, &enc));
    let back = inversion_from_bundle(&bundle).unwrap();
    assert_eq!(back.params.len(), enc.params.len());
    assert!(back.params.iter().all(|(n, t)| t.bit_eq(enc.params.get(n).unwrap())));

    let err = decoder_from_bundle(&bundle).unwrap_err();
    assert_eq!(err.exit_code(), 3, "{err}");
    assert!(bundle.expect_kind(KIND_DECODER).is_err());
}

#[test]
fn damaged_bytes_are_rejected() {
    let cfg = tiny_config();
    let dec = LatentDecoder::<f32>::new(cfg.decoder_config(), 1).unwrap();
    let bytes = decoder_bundle(&cfg, &dec, None).to_bytes();
    let mut flipped = bytes.clone();
    let last = flipped.len() - 3;
    flipped[last] ^= 0x40;
    for bad in [&bytes[..bytes.len() - 1], &flipped[..], &bytes[..6], b"NOTACKPT0000"] {
        let err = CheckpointBundle::from_bytes(bad).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }
}
