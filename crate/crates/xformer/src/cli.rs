//! Command-line surface: `describe`, `train`, `denoise`, and `eval`.
//! Exit codes: 0 success, 2 usage/configuration, 3 numeric failure.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{self, RunConfig};
use crate::error::{Result, XError};
use crate::image_io::{image_read, image_write, Image};
use crate::metrics::{psnr, ssim};
use crate::network::{
    ablation_variant, build, flop_report, forward, param_count, visit_params, ModelParams,
};
use crate::train::{add_gaussian_noise, derive_rng, load_image_dir, train_loop, TrainSession};

#[derive(Parser)]
#[command(
    name = "xformer",
    about = "Dual-branch spatial/channel attention image denoiser",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Report parameter count, FLOPs, and a per-module breakdown.
    Describe {
        /// Config file (text or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Square input size used for the FLOP estimate.
        #[arg(long, default_value_t = 128)]
        input_size: usize,
        /// Apply a named variant: all_stb, all_ctb, bcu_1, bcu_2, off, no_shift.
        #[arg(long)]
        ablation: Option<String>,
        /// Initialization seed for the instantiated model.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model per the config's [train] and [paths] sections.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Restore one image with a trained checkpoint.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional demo noise (0-255 scale) injected before restoration.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on a directory of clean images under synthetic noise.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Noise level on the 0-255 scale.
        #[arg(long)]
        sigma: f64,
        /// Optional CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

pub fn exit_code_for(err: &XError) -> u8 {
    match err {
        XError::Numeric(_) => 3,
        _ => 2,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => config::load(p),
        None => Ok(RunConfig::default()),
    }
}

pub fn run(cli: Cli, out: &mut dyn IoWrite) -> Result<()> {
    match cli.command {
        Command::Describe {
            config,
            input_size,
            ablation,
            seed,
        } => cmd_describe(config.as_deref(), input_size, ablation.as_deref(), seed, out),
        Command::Train {
            config,
            resume,
            seed,
        } => cmd_train(&config, resume.as_deref(), seed, out),
        Command::Denoise {
            checkpoint,
            input,
            out: out_path,
            sigma,
            seed,
        } => cmd_denoise(&checkpoint, &input, &out_path, sigma, seed, out),
        Command::Eval {
            checkpoint,
            data,
            sigma,
            out: out_path,
            seed,
        } => cmd_eval(&checkpoint, &data, sigma, out_path.as_deref(), seed, out),
    }
}

fn group_of(path: &str) -> String {
    let mut parts = path.split('.');
    let head = parts.next().unwrap_or(path);
    match head {
        "spatial" | "channel" => {
            let sub = parts.next().unwrap_or("");
            let stage: String = sub.chars().take_while(|c| c.is_alphabetic()).collect();
            match stage.as_str() {
                "down" | "up" => format!("{head}.resample"),
                "reduce" => format!("{head}.skip"),
                _ => format!("{head}.{stage}"),
            }
        }
        other => other.to_string(),
    }
}

fn cmd_describe(
    config: Option<&Path>,
    input_size: usize,
    ablation: Option<&str>,
    seed: Option<u64>,
    out: &mut dyn IoWrite,
) -> Result<()> {
    let mut cfg = load_config(config)?.model;
    if let Some(which) = ablation {
        cfg = ablation_variant(&cfg, which)?;
    }
    cfg.validate()?;
    if input_size < 8 {
        return Err(XError::Usage(format!(
            "input size must be at least 8, got {input_size}"
        )));
    }
    let model: ModelParams<f32> = build(&cfg, seed.unwrap_or(0))?;
    let total = param_count(&model);
    let flops = flop_report(&cfg, input_size, input_size);

    let io_err = |e: std::io::Error| XError::io("stdout", e);
    writeln!(out, "parameters: {total} ({:.2}M)", total as f64 / 1e6).map_err(io_err)?;
    writeln!(
        out,
        "flops @ {}x{input_size}x{input_size}: {} ({:.1}G)",
        cfg.in_channels,
        flops.total(),
        flops.total() as f64 / 1e9
    )
    .map_err(io_err)?;

    writeln!(out, "\nparameters by module:").map_err(io_err)?;
    let mut groups: Vec<(String, usize)> = Vec::new();
    visit_params(&model, &mut |name, t| {
        let g = group_of(name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, c)) => *c += t.numel(),
            None => groups.push((g, t.numel())),
        }
    });
    for (name, count) in &groups {
        writeln!(out, "  {name:<18} {count:>12}").map_err(io_err)?;
    }

    writeln!(out, "\nflops by module:").map_err(io_err)?;
    for (name, v) in [
        ("shallow", flops.shallow),
        ("spatial_branch", flops.spatial_branch),
        ("channel_branch", flops.channel_branch),
        ("bottleneck", flops.bottleneck),
        ("bcu", flops.bcu),
        ("resample", flops.resample),
        ("skip_fuse", flops.skip_fuse),
        ("refinement", flops.refinement),
        ("output", flops.output),
    ] {
        writeln!(out, "  {name:<18} {v:>14}").map_err(io_err)?;
    }
    Ok(())
}

fn cmd_train(
    config: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    out: &mut dyn IoWrite,
) -> Result<()> {
    let mut run_cfg = config::load(config)?;
    if let Some(s) = seed {
        run_cfg.train.seed = s;
    }
    let data_dir = run_cfg
        .paths
        .data
        .as_deref()
        .ok_or_else(|| XError::Usage("config [paths] must set a data directory".into()))?;
    if !data_dir.is_dir() {
        return Err(XError::Usage(format!(
            "data directory {} does not exist",
            data_dir.display()
        )));
    }
    let out_dir = run_cfg
        .paths
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs"));
    let outcome = train_loop(&TrainSession {
        config: &run_cfg.model,
        plan: &run_cfg.train,
        data_dir,
        val_dir: run_cfg.paths.val.as_deref(),
        out_dir: &out_dir,
        resume,
        stop_after: None,
    })?;
    writeln!(
        out,
        "trained {} iterations, final loss {:.6}",
        outcome.iterations, outcome.final_loss
    )
    .map_err(|e| XError::io("stdout", e))?;
    writeln!(out, "log: {}", outcome.log_path.display())
        .map_err(|e| XError::io("stdout", e))?;
    writeln!(out, "checkpoint: {}", outcome.checkpoint_path.display())
        .map_err(|e| XError::io("stdout", e))?;
    if let Some((iter, p, s)) = outcome.validations.last() {
        writeln!(out, "validation @ {iter}: psnr {p:.3} dB, ssim {s:.4}")
            .map_err(|e| XError::io("stdout", e))?;
    }
    Ok(())
}

fn cmd_denoise(
    checkpoint: &Path,
    input: &Path,
    out_path: &Path,
    sigma: Option<f64>,
    seed: Option<u64>,
    out: &mut dyn IoWrite,
) -> Result<()> {
    let model = crate::checkpoint::load_model(checkpoint)?;
    let img = image_read(input)?;
    if img.channels != model.config.in_channels {
        return Err(XError::Usage(format!(
            "{}: image has {} channels but the checkpoint expects {}",
            input.display(),
            img.channels,
            model.config.in_channels
        )));
    }
    let noisy = match sigma {
        Some(s) => {
            let mut rng = derive_rng(seed.unwrap_or(0), 0);
            add_gaussian_noise(&img, s, &mut rng)?
        }
        None => img,
    };
    let restored = Image::from_tensor(&forward(&model, &noisy.to_tensor::<f32>())?)?.clipped();
    image_write(&restored, out_path)?;
    writeln!(out, "wrote {}", out_path.display()).map_err(|e| XError::io("stdout", e))?;
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    sigma: f64,
    out_path: Option<&Path>,
    seed: Option<u64>,
    out: &mut dyn IoWrite,
) -> Result<()> {
    if sigma < 0.0 {
        return Err(XError::Usage(format!("sigma must be non-negative, got {sigma}")));
    }
    let model = crate::checkpoint::load_model(checkpoint)?;
    let images = load_image_dir(data)?;
    if images.is_empty() {
        return Err(XError::Usage(format!(
            "no readable images in {}",
            data.display()
        )));
    }
    let seed = seed.unwrap_or(0);
    let io_err = |e: std::io::Error| XError::io("stdout", e);
    let mut csv = String::from("image,psnr,ssim\n");
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    writeln!(out, "{:<24} {:>9} {:>8}", "image", "psnr", "ssim").map_err(io_err)?;
    for (i, (path, clean)) in images.iter().enumerate() {
        if clean.channels != model.config.in_channels {
            return Err(XError::Usage(format!(
                "{}: image has {} channels but the checkpoint expects {}",
                path.display(),
                clean.channels,
                model.config.in_channels
            )));
        }
        // fixed noise per image index so repeat runs are identical
        let mut rng = derive_rng(seed, i as u64);
        let noisy = add_gaussian_noise(clean, sigma, &mut rng)?;
        let restored =
            Image::from_tensor(&forward(&model, &noisy.to_tensor::<f32>())?)?.clipped();
        let p = psnr(&restored, clean, 1.0)?;
        let s = ssim(&restored, clean)?;
        psnr_sum += p;
        ssim_sum += s;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        writeln!(out, "{name:<24} {p:>9.4} {s:>8.4}").map_err(io_err)?;
        csv.push_str(&format!("{name},{p},{s}\n"));
    }
    let n = images.len() as f64;
    let (mp, ms) = (psnr_sum / n, ssim_sum / n);
    writeln!(out, "{:<24} {mp:>9.4} {ms:>8.4}", "mean").map_err(io_err)?;
    csv.push_str(&format!("mean,{mp},{ms}\n"));
    if let Some(p) = out_path {
        std::fs::write(p, csv).map_err(|e| XError::io(p.display().to_string(), e))?;
        writeln!(out, "wrote {}", p.display()).map_err(io_err)?;
    }
    Ok(())
}
