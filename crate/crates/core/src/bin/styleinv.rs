use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use styleinv::checkpoint::CheckpointBundle;
use styleinv::config::RunConfig;
use styleinv::generate::{GenerateRequest, VideoGenerator};
use styleinv::{io, pipeline, Error, Result};

#[derive(Parser)]
#[command(name = "styleinv", version, about = "Train and sample temporal-style inversion video generators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration in `key = value` form.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the image decoder on dataset frames.
    PretrainGan(ConfigArg),
    /// Train the raw inversion encoder against a frozen decoder.
    PretrainEncoder {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        decoder: PathBuf,
    },
    /// Train the motion generator with first-frame-aware sparse training.
    TrainStyleinv {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        inversion: PathBuf,
    },
    /// Fine-tune the decoder toward a colour-remapped target domain.
    FinetuneStyle {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        inversion: PathBuf,
    },
    /// Write the frames of one generated video.
    Generate {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        styleinv: PathBuf,
        /// Defaults to $STYLEINV_SEED, then the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        fps_multiplier: usize,
        #[arg(long)]
        truncation: Option<f64>,
        /// Use the inversion of this image as the first latent.
        #[arg(long, requires = "inversion")]
        init_image: Option<PathBuf>,
        #[arg(long)]
        inversion: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write a single-row contact sheet here.
        #[arg(long)]
        sheet: Option<PathBuf>,
    },
    /// Compare generated clips with dataset clips.
    Eval {
        #[arg(long)]
        decoder: PathBuf,
        #[arg(long)]
        styleinv: PathBuf,
        /// Overrides the evaluation settings echoed in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Render dataset videos as PNG frame directories.
    ExportDataset {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        videos: usize,
    },
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn write_log(cfg: &RunConfig, name: &str, rows: &[styleinv::training::MetricsRow]) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut f = std::fs::File::create(out_path(cfg, name))?;
    pipeline::report_rows(&mut f, rows, 1)?;
    pipeline::report_rows(&mut std::io::stdout(), rows, cfg.log_every)
}

fn save(bundle: &CheckpointBundle, path: &Path) -> Result<()> {
    bundle.save(path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainGan(a) => {
            let cfg = load_config(&a.config)?;
            let stage = pipeline::pretrain_gan(&cfg, cfg.gan_steps)?;
            write_log(&cfg, "gan_metrics.txt", &stage.log)?;
            save(&pipeline::decoder_bundle(&cfg, &stage.decoder, Some(&stage.d_params)), &out_path(&cfg, "decoder.ckpt"))
        }
        Command::PretrainEncoder { cfg, decoder } => {
            let cfg = load_config(&cfg.config)?;
            let (_, dec, _) = pipeline::decoder_from_bundle(&CheckpointBundle::load(&decoder)?)?;
            let (enc, log) = pipeline::pretrain_inversion(&cfg, &dec, cfg.inv_steps)?;
            write_log(&cfg, "inversion_metrics.txt", &log)?;
            save(&pipeline::inversion_bundle(&cfg, &enc), &out_path(&cfg, "inversion.ckpt"))
        }
        Command::TrainStyleinv { cfg, decoder, inversion } => {
            let cfg = load_config(&cfg.config)?;
            let (_, dec, _) = pipeline::decoder_from_bundle(&CheckpointBundle::load(&decoder)?)?;
            let inv = pipeline::inversion_from_bundle(&CheckpointBundle::load(&inversion)?)?;
            let stage = pipeline::train_styleinv(&cfg, &dec, &inv, cfg.train_steps)?;
            write_log(&cfg, "styleinv_metrics.txt", &stage.log)?;
            save(&pipeline::styleinv_bundle(&cfg, &stage.model, Some(&stage.d_params)), &out_path(&cfg, "styleinv.ckpt"))
        }
        Command::FinetuneStyle { cfg, decoder, inversion } => {
            let cfg = load_config(&cfg.config)?;
            let (_, dec, d_img) = pipeline::decoder_from_bundle(&CheckpointBundle::load(&decoder)?)?;
            let inv = pipeline::inversion_from_bundle(&CheckpointBundle::load(&inversion)?)?;
            let target = pipeline::style_target(&cfg)?;
            let ft = pipeline::finetune_style(&cfg, &dec, d_img.as_ref(), &inv, target, cfg.transfer_steps)?;
            write_log(&cfg, "transfer_metrics.txt", &ft.log)?;
            save(&pipeline::child_bundle(&cfg, &ft), &out_path(&cfg, "child_decoder.ckpt"))
        }
        Command::Generate {
            decoder,
            styleinv,
            seed,
            frames,
            fps_multiplier,
            truncation,
            init_image,
            inversion,
            out,
            sheet,
        } => {
            let (_, dec, _) = pipeline::decoder_from_bundle(&CheckpointBundle::load(&decoder)?)?;
            let (mut cfg, model) = pipeline::styleinv_from_bundle(&CheckpointBundle::load(&styleinv)?)?;
            cfg.apply_env()?;
            let inv = inversion.map(|p| CheckpointBundle::load(&p).and_then(|b| pipeline::inversion_from_bundle(&b))).transpose()?;
            let mut gen = VideoGenerator::new(&dec, &model);
            if let Some(inv) = &inv {
                gen = gen.with_inversion(inv);
            }
            let mut req = GenerateRequest::new(seed.unwrap_or(cfg.seed), frames);
            req.fps_multiplier = fps_multiplier;
            req.truncation = truncation.unwrap_or(cfg.truncation);
            if let Some(p) = init_image {
                let img = io::load_png::<f32>(&p)?;
                let want = [dec.config.img_channels, dec.config.img_resolution, dec.config.img_resolution];
                if img.shape() != want {
                    return Err(Error::InvalidArgument(format!("init image {:?} does not match {want:?}", img.shape())));
                }
                req.init_image = Some(img);
            }
            let video = gen.generate(&req)?;
            io::save_frames(&out, &video.frames)?;
            if let Some(s) = sheet {
                io::contact_sheet(&[video.frames.clone()])?.save(&s)?;
            }
            println!("wrote {} frames to {}", video.frames.len(), out.display());
            Ok(())
        }
        Command::Eval { decoder, styleinv, config, json } => {
            let (_, dec, _) = pipeline::decoder_from_bundle(&CheckpointBundle::load(&decoder)?)?;
            let (echo, model) = pipeline::styleinv_from_bundle(&CheckpointBundle::load(&styleinv)?)?;
            let cfg = match config {
                Some(p) => load_config(&p)?,
                None => echo,
            };
            let report = pipeline::evaluate(&cfg, &dec, &model)?;
            print!("{}", report.to_lines());
            if let Some(p) = json {
                std::fs::write(p, report.to_json())?;
            }
            Ok(())
        }
        Command::ExportDataset { cfg, out, videos } => {
            let cfg = load_config(&cfg.config)?;
            let ds = pipeline::dataset(&cfg)?;
            for v in 0..videos.min(ds.len()) {
                io::save_frames(&out.join(format!("video_{v:04}")), &ds.clip(v, cfg.data_length)?)?;
            }
            println!("exported {} videos to {}", videos.min(ds.len()), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
