//! The `gramsr` command line.

use std::ffi::OsString;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gramsr_core::degrade::degrade;
use gramsr_core::guidance::{self, GuidanceMode, GuidanceScales};
use gramsr_core::image::{load_image, save_image, ImageTensor};
use gramsr_core::pipeline::Pipeline;
use gramsr_core::trainer::{
    load_checkpoint, pretrain_base, save_checkpoint, train_stage, validate, Checkpoint, Pair,
    RunConfig,
};

use crate::server::{serve, AppState};

pub const DEFAULT_PORT: u16 = 8731;
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Debug, Parser)]
#[command(name = "gramsr", version, about = "Guided one-step super-resolution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the base denoiser and write a stage-0 checkpoint.
    Pretrain {
        #[arg(long, env = "GRAMSR_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one adapter stage on top of the previous stage's checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "GRAMSR_CONFIG")]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one image with the given guidance scales.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Restore one image over a grid of texture scales and write a CSV.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Ground truth; without it only the Gram distance to the upsampled input is reported.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lpix: f64,
        #[arg(long, default_value_t = 1.0)]
        lsem: f64,
        #[arg(long, value_delimiter = ',', default_values_t = [0.25, 0.5, 0.75, 1.0])]
        lgram: Vec<f64>,
        #[arg(long, default_value = "residual")]
        mode: GuidanceMode,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Degrade every HQ image in a folder and report mean metrics of the restorations.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dir: PathBuf,
        #[command(flatten)]
        guidance: GuidanceArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write `<stem>_lq.png` / `<stem>_hq.png` pairs for an image or a folder.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "GRAMSR_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve `/api/infer`, `/api/health` and `/api/model`.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = "GRAMSR_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

#[derive(Debug, Clone, Copy, Args)]
pub struct GuidanceArgs {
    #[arg(long, default_value_t = 1.0)]
    pub lpix: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lsem: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lgram: f64,
    #[arg(long, default_value = "residual")]
    pub mode: GuidanceMode,
}

impl GuidanceArgs {
    pub fn scales(&self) -> GuidanceScales {
        GuidanceScales::new(self.lpix, self.lsem, self.lgram)
    }
}

/// Parses `argv` and runs the command. Returns the process exit code: 0 on
/// success, 2 for usage errors, 1 for any other failure.
pub fn run<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading run config {}", path.display()))
}

fn load_ckpt(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_input(path: &Path) -> Result<ImageTensor> {
    load_image(path).with_context(|| format!("reading image {}", path.display()))
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Pretrain { config, out } => {
            let cfg = load_config(&config)?;
            let ckpt = pretrain_base(&cfg)?;
            save_checkpoint(&ckpt, &out)?;
            eprintln!("stage 0 written to {} after {} steps", out.display(), ckpt.step);
        }
        Command::Train {
            stage,
            ckpt,
            config,
            out,
        } => {
            let cfg = load_config(&config)?;
            let prev = load_ckpt(&ckpt)?;
            let next = train_stage(stage, &prev, &cfg)?;
            save_checkpoint(&next, &out)?;
            if let Some(rec) = next.history.last() {
                eprintln!(
                    "stage {stage} written to {}: psnr {:.3} ssim {:.4} gram {:.4e} perceptual {:.4}",
                    out.display(),
                    rec.psnr,
                    rec.ssim,
                    rec.gram_distance,
                    rec.perceptual
                );
            }
        }
        Command::Infer {
            ckpt,
            input,
            out,
            guidance,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let pipeline = Pipeline::new(&ckpt.config)?;
            let lq = load_input(&input)?;
            let sr = guidance::infer(&pipeline, &lq, &guidance.scales(), guidance.mode, &ckpt)?;
            save_image(&sr, &out)?;
        }
        Command::Sweep {
            ckpt,
            input,
            gt,
            lpix,
            lsem,
            lgram,
            mode,
            out,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let pipeline = Pipeline::new(&ckpt.config)?;
            let lq = load_input(&input)?;
            let gt = gt.as_deref().map(load_input).transpose()?;
            let grid: Vec<GuidanceScales> = lgram
                .iter()
                .map(|&g| GuidanceScales::new(lpix, lsem, g))
                .collect();
            let report = guidance::sweep(&pipeline, &lq, &grid, mode, &ckpt, gt.as_ref())?;
            let csv = report.to_csv();
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .with_context(|| format!("writing {}", path.display()))?,
                None => print!("{csv}"),
            }
        }
        Command::Evaluate {
            ckpt,
            dir,
            guidance,
            seed,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let pairs = folder_pairs(&dir, &ckpt.config, seed)?;
            let mut eval_ckpt = ckpt;
            eval_ckpt.config.guidance_mode = guidance.mode;
            let report = validate(&eval_ckpt, &pairs, &guidance.scales())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Degrade {
            input,
            out,
            config,
            seed,
        } => {
            let cfg = match config {
                Some(path) => load_config(&path)?,
                None => RunConfig::default(),
            };
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let files = image_files(&input)?;
            for (i, file) in files.iter().enumerate() {
                let hq = crop_to_multiple(&load_input(file)?, cfg.degradation.downscale_factor)?;
                let lq = degrade(&hq, &cfg.degradation, seed.wrapping_add(i as u64))?;
                let stem = file
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("image");
                save_image(&lq, out.join(format!("{stem}_lq.png")))?;
                save_image(&hq, out.join(format!("{stem}_hq.png")))?;
            }
            eprintln!("{} pairs written to {}", files.len(), out.display());
        }
        Command::Serve {
            ckpt,
            config,
            port,
            host,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            if let Some(path) = config {
                load_config(&path)?
                    .check_compatible(&ckpt.config)
                    .context("the config does not match the checkpoint")?;
            }
            let state = Arc::new(AppState::new(ckpt)?);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(serve(state, SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

/// A single image file, or every image file in a folder in name order.
fn image_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading folder {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no images found in {}", path.display());
    }
    Ok(files)
}

/// Centre crop to the largest size divisible by `m`.
fn crop_to_multiple(img: &ImageTensor, m: usize) -> Result<ImageTensor> {
    let (h, w) = (img.height() / m * m, img.width() / m * m);
    if h == 0 || w == 0 {
        bail!("{}x{} image is smaller than {m}", img.height(), img.width());
    }
    Ok(img.crop((img.height() - h) / 2, (img.width() - w) / 2, h, w)?)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// HQ side lengths the pipeline accepts: divisible by the downscale factor,
/// both encoder patch sizes, and four latent cells.
fn hq_multiple(cfg: &RunConfig) -> usize {
    [
        cfg.degradation.downscale_factor,
        cfg.encoders.conditioning.patch_size,
        cfg.encoders.gram.patch_size,
        4 * cfg.codec_stride,
    ]
    .into_iter()
    .fold(1, lcm)
}

fn folder_pairs(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<Vec<Pair>> {
    let m = hq_multiple(cfg);
    image_files(dir)?
        .iter()
        .enumerate()
        .map(|(i, file)| {
            let mut hq = crop_to_multiple(&load_input(file)?, m)?;
            if hq.channels() == 1 {
                hq = hq.gray_to_rgb()?;
            }
            let lq = degrade(&hq, &cfg.degradation, seed.wrapping_add(i as u64))?;
            Ok(Pair { lq, hq })
        })
        .collect()
}
