//! Training and evaluation machinery: L1 loss, AdamW with decoupled weight
//! decay, cosine learning-rate annealing, the progressive batch/patch
//! schedule, Gaussian noise synthesis, dihedral augmentation, and the
//! seeded training loop.

use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, XError};
use crate::image_io::{image_read, Image};
use crate::metrics::{psnr, ssim};
use crate::network::{build, collect_params, forward, ModelParams, XformerConfig};
use crate::tensor::{c64, ops, Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressivePhase {
    pub start_iter: u64,
    pub batch: usize,
    pub patch: usize,
}

/// Optimizer hyperparameters, schedules, and data synthesis settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub total_iters: u64,
    pub lr0: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub progressive: Vec<ProgressivePhase>,
    /// Noise standard deviation on the 0-255 intensity scale.
    pub noise_sigma: f64,
    pub seed: u64,
    pub val_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let phases = [
            (0u64, 64usize, 128usize),
            (92_000, 40, 160),
            (156_000, 32, 192),
            (204_000, 16, 256),
            (240_000, 8, 320),
            (276_000, 8, 384),
        ];
        TrainPlan {
            total_iters: 300_000,
            lr0: 3e-4,
            lr_min: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            progressive: phases
                .iter()
                .map(|&(start_iter, batch, patch)| ProgressivePhase {
                    start_iter,
                    batch,
                    patch,
                })
                .collect(),
            noise_sigma: 25.0,
            seed: 0,
            val_interval: 100,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.progressive.is_empty() || self.progressive[0].start_iter != 0 {
            return Err(XError::Config(
                "progressive schedule must start at iteration 0".into(),
            ));
        }
        for w in self.progressive.windows(2) {
            if w[1].start_iter <= w[0].start_iter {
                return Err(XError::Config(
                    "progressive start iterations must be strictly increasing".into(),
                ));
            }
        }
        if self.progressive.iter().any(|p| p.batch == 0 || p.patch == 0) {
            return Err(XError::Config("batch and patch sizes must be positive".into()));
        }
        if !(self.lr_min < self.lr0) {
            return Err(XError::Config(format!(
                "lr_min {} must be below lr0 {}",
                self.lr_min, self.lr0
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(XError::Usage(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.total_iters == 0 || self.val_interval == 0 || self.checkpoint_interval == 0 {
            return Err(XError::Config("iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at iteration 0 down to `lr_min` at
/// `total_iters`.
pub fn cosine_lr(iter: u64, plan: &TrainPlan) -> Result<f64> {
    if iter > plan.total_iters {
        return Err(XError::Usage(format!(
            "iteration {iter} beyond schedule end {}",
            plan.total_iters
        )));
    }
    let t = iter as f64 / plan.total_iters as f64;
    Ok(plan.lr_min + 0.5 * (plan.lr0 - plan.lr_min) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// The last progressive phase whose start iteration is at or before `iter`.
pub fn progressive_lookup(iter: u64, plan: &TrainPlan) -> (usize, usize) {
    let mut cur = (plan.progressive[0].batch, plan.progressive[0].patch);
    for p in &plan.progressive {
        if p.start_iter <= iter {
            cur = (p.batch, p.patch);
        }
    }
    cur
}

/// Mean absolute difference (mean-reduced so the scale is independent of
/// batch and patch sizes); sign subgradient, zero at ties.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mean_all(&ops::abs(&ops::sub(pred, target)?))
}

/// Per-parameter first and second moments plus the shared step counter.
pub struct OptimizerState<T: Scalar> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        OptimizerState {
            first_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    fn check(&self, params: &[Tensor<T>]) -> Result<()> {
        if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params)
                .any(|(m, p)| m.len() != p.numel())
        {
            return Err(XError::Dim(
                "optimizer state does not match the parameter list".into(),
            ));
        }
        Ok(())
    }
}

/// One AdamW update: decoupled weight decay, then the bias-corrected Adam
/// step with the gradients currently accumulated on `params`. A non-finite
/// gradient rejects the whole step.
pub fn adamw_step<T: Scalar>(
    params: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    plan: &TrainPlan,
) -> Result<()> {
    state.check(params)?;
    let grads: Vec<Vec<T>> = params.iter().map(|p| p.grad_or_zeros()).collect();
    for g in &grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(XError::Numeric(
                "step rejected: non-finite gradient".into(),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let lr_t = c64::<T>(lr);
    let wd = c64::<T>(plan.weight_decay);
    let b1 = c64::<T>(plan.beta1);
    let b2 = c64::<T>(plan.beta2);
    let eps = c64::<T>(ADAM_EPS);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    for ((p, g), (m, v)) in params.iter().zip(&grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        p.update_data(|data| {
            for j in 0..data.len() {
                data[j] = data[j] - lr_t * wd * data[j];
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] = data[j] - lr_t * mh / (vh.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// Adds i.i.d. Gaussian noise with standard deviation `sigma_255/255`;
/// the result is intentionally not clipped.
pub fn add_gaussian_noise(img: &Image, sigma_255: f64, rng: &mut ChaCha8Rng) -> Result<Image> {
    if sigma_255 < 0.0 {
        return Err(XError::Usage(format!(
            "noise sigma must be non-negative, got {sigma_255}"
        )));
    }
    let mut out = img.clone();
    if sigma_255 == 0.0 {
        return Ok(out);
    }
    let dist = Normal::new(0.0, sigma_255 / 255.0)
        .map_err(|e| XError::Numeric(format!("noise distribution: {e}")))?;
    for v in &mut out.data {
        *v += dist.sample(rng) as f32;
    }
    Ok(out)
}

/// Applies dihedral transform `k` (0..8): `k % 4` clockwise quarter turns,
/// then a horizontal flip when `k >= 4`. Quarter turns require a square
/// image; the half turn and the flips do not.
pub fn dihedral(img: &Image, k: usize) -> Result<Image> {
    if k >= 8 {
        return Err(XError::Usage(format!("dihedral index {k} out of range")));
    }
    let quarter = k % 4;
    if quarter % 2 == 1 && img.height != img.width {
        return Err(XError::Usage(format!(
            "quarter-turn rotation requires a square image, got {}x{}",
            img.height, img.width
        )));
    }
    let (h, w, c) = img.shape();
    let flip = k >= 4;
    let mut data = vec![0.0f32; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            let xr = if flip { w - 1 - x } else { x };
            let (sy, sx) = match quarter {
                0 => (y, xr),
                1 => (h - 1 - xr, y),
                2 => (h - 1 - y, w - 1 - xr),
                _ => (xr, w - 1 - y),
            };
            for ch in 0..c {
                data[(y * w + x) * c + ch] = img.data[(sy * w + sx) * c + ch];
            }
        }
    }
    Image::new(h, w, c, data)
}

/// One of the eight dihedral transforms, chosen uniformly.
pub fn augment(img: &Image, rng: &mut ChaCha8Rng) -> Result<Image> {
    let k = rng.gen_range(0..8);
    dihedral(img, k)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for `(seed, stream)`; resuming a run re-derives
/// identical per-iteration streams without storing RNG state.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ stream.wrapping_mul(GOLDEN)))
}

const VAL_STREAM_SALT: u64 = 0x5641_4c21; // "VAL!"

/// Loads every PNG/PGM/PPM in `dir`, sorted by file name.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(PathBuf, Image)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| XError::io(dir.display().to_string(), e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png") | Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let img = image_read(&p)?;
        out.push((p, img));
    }
    Ok(out)
}

pub struct TrainOutcome {
    pub iterations: u64,
    pub final_loss: f64,
    /// Mean loss over consecutive 100-iteration windows.
    pub window_means: Vec<f64>,
    pub log_path: PathBuf,
    pub checkpoint_path: PathBuf,
    /// `(iteration, mean PSNR, mean SSIM)` per validation round.
    pub validations: Vec<(u64, f64, f64)>,
}

pub struct TrainSession<'a> {
    pub config: &'a XformerConfig,
    pub plan: &'a TrainPlan,
    pub data_dir: &'a Path,
    pub val_dir: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub resume: Option<&'a Path>,
    /// Stop this session after N iterations without touching the schedule;
    /// a later session can resume from the checkpoint. `None` runs to the
    /// plan's end.
    pub stop_after: Option<u64>,
}

fn to_gray(img: &Image) -> Image {
    if img.channels == 1 {
        return img.clone();
    }
    let mut data = Vec::with_capacity(img.height * img.width);
    for px in img.data.chunks(3) {
        data.push(0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]);
    }
    Image::new(img.height, img.width, 1, data).expect("gray conversion")
}

fn match_channels(img: &Image, channels: usize, path: &Path) -> Result<Image> {
    match (img.channels, channels) {
        (a, b) if a == b => Ok(img.clone()),
        (3, 1) => Ok(to_gray(img)),
        (a, b) => Err(XError::Usage(format!(
            "{}: image has {a} channels, model expects {b}",
            path.display()
        ))),
    }
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Seeded training: per iteration, sample crops at the progressive
/// batch/patch sizes, augment, add noise, take one AdamW step at the cosine
/// learning rate; periodically validate and checkpoint. Fully reproducible
/// for a fixed seed, including across resume boundaries.
pub fn train_loop(session: &TrainSession) -> Result<TrainOutcome> {
    let cfg = session.config;
    let plan = session.plan;
    cfg.validate()?;
    plan.validate()?;

    let train_images: Vec<(PathBuf, Image)> = load_image_dir(session.data_dir)?
        .into_iter()
        .map(|(p, img)| match_channels(&img, cfg.in_channels, &p).map(|i| (p, i)))
        .collect::<Result<_>>()?;
    if train_images.is_empty() {
        return Err(XError::Usage(format!(
            "no readable images in {}",
            session.data_dir.display()
        )));
    }
    let val_images: Vec<(PathBuf, Image)> = match session.val_dir {
        Some(d) => load_image_dir(d)?
            .into_iter()
            .map(|(p, img)| match_channels(&img, cfg.in_channels, &p).map(|i| (p, i)))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };

    std::fs::create_dir_all(session.out_dir)
        .map_err(|e| XError::io(session.out_dir.display().to_string(), e))?;
    let ckpt_path = session.out_dir.join("checkpoint.xfmr");
    let opt_path = session.out_dir.join("checkpoint.xopt");
    let log_path = session.out_dir.join("log.csv");

    let (model, mut state, start_iter): (ModelParams<f32>, OptimizerState<f32>, u64) =
        match session.resume {
            Some(p) => {
                let model = crate::checkpoint::load_model(p)?;
                let (state, iter) = crate::checkpoint::load_optimizer(&p.with_extension("xopt"))?;
                (model, state, iter)
            }
            None => {
                let model = build::<f32>(cfg, plan.seed)?;
                let tensors: Vec<Tensor<f32>> =
                    collect_params(&model).into_iter().map(|(_, t)| t).collect();
                let state = OptimizerState::new(&tensors);
                (model, state, 0)
            }
        };
    let params: Vec<Tensor<f32>> = collect_params(&model).into_iter().map(|(_, t)| t).collect();

    let mut log = std::io::BufWriter::new(
        std::fs::OpenOptions::new()
            .create(true)
            .append(start_iter > 0)
            .write(true)
            .truncate(start_iter == 0)
            .open(&log_path)
            .map_err(|e| XError::io(log_path.display().to_string(), e))?,
    );
    if start_iter == 0 {
        writeln!(log, "iter,lr,batch,patch,loss,val_psnr,val_ssim")
            .map_err(|e| XError::io(log_path.display().to_string(), e))?;
    }

    let mut window_means = Vec::new();
    let mut window_acc = 0.0f64;
    let mut window_n = 0u64;
    let mut validations = Vec::new();
    let mut final_loss = f64::NAN;

    let end_iter = match session.stop_after {
        Some(n) => plan.total_iters.min(start_iter + n),
        None => plan.total_iters,
    };
    for iter in start_iter..end_iter {
        let (batch, patch) = progressive_lookup(iter, plan);
        let lr = cosine_lr(iter, plan)?;
        let mut rng = derive_rng(plan.seed, iter);

        let eligible: Vec<usize> = train_images
            .iter()
            .enumerate()
            .filter(|(_, (_, img))| img.height >= patch && img.width >= patch)
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(XError::Usage(format!(
                "no training image is at least {patch}x{patch} for the phase at iteration {iter}"
            )));
        }

        for t in &params {
            t.zero_grad();
        }
        let mut loss_sum: Option<Tensor<f32>> = None;
        for _ in 0..batch {
            let (_, img) = &train_images[eligible[rng.gen_range(0..eligible.len())]];
            let y = rng.gen_range(0..=img.height - patch);
            let x = rng.gen_range(0..=img.width - patch);
            let clean = augment(&img.crop(y, x, patch, patch)?, &mut rng)?;
            let noisy = add_gaussian_noise(&clean, plan.noise_sigma, &mut rng)?;
            let pred = forward(&model, &noisy.to_tensor::<f32>())?;
            let sample_loss = l1_loss(&pred, &clean.to_tensor::<f32>())?;
            loss_sum = Some(match loss_sum {
                Some(acc) => ops::add(&acc, &sample_loss)?,
                None => sample_loss,
            });
        }
        let loss = ops::scale(&loss_sum.expect("batch is non-empty"), 1.0 / batch as f64);
        let loss_value = loss.item() as f64;
        if !loss_value.is_finite() {
            return Err(XError::Numeric(format!(
                "non-finite loss {loss_value} at iteration {iter}"
            )));
        }
        loss.backward()?;
        adamw_step(&params, &mut state, lr, plan)?;

        final_loss = loss_value;
        window_acc += loss_value;
        window_n += 1;
        if window_n == 100 {
            window_means.push(window_acc / 100.0);
            window_acc = 0.0;
            window_n = 0;
        }

        let do_val = !val_images.is_empty()
            && ((iter + 1) % plan.val_interval == 0 || iter + 1 == plan.total_iters);
        let (vp, vs) = if do_val {
            let (p, s) = validate(&model, &val_images, plan)?;
            validations.push((iter, p, s));
            (fmt_f64(p), fmt_f64(s))
        } else {
            (String::new(), String::new())
        };
        writeln!(
            log,
            "{},{},{},{},{},{},{}",
            iter,
            fmt_f64(lr),
            batch,
            patch,
            fmt_f64(loss_value),
            vp,
            vs
        )
        .map_err(|e| XError::io(log_path.display().to_string(), e))?;

        if (iter + 1) % plan.checkpoint_interval == 0 || iter + 1 == end_iter {
            crate::checkpoint::save_model(&model, &ckpt_path)?;
            crate::checkpoint::save_optimizer(&state, iter + 1, &opt_path)?;
        }
    }
    log.flush()
        .map_err(|e| XError::io(log_path.display().to_string(), e))?;

    Ok(TrainOutcome {
        iterations: end_iter - start_iter,
        final_loss,
        window_means,
        log_path,
        checkpoint_path: ckpt_path,
        validations,
    })
}

/// Mean denoised PSNR/SSIM over the validation images. Each image gets a
/// fixed noise realization derived from the seed and its index.
pub fn validate(
    model: &ModelParams<f32>,
    images: &[(PathBuf, Image)],
    plan: &TrainPlan,
) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for (i, (_, clean)) in images.iter().enumerate() {
        let mut rng = derive_rng(plan.seed ^ VAL_STREAM_SALT, i as u64);
        let noisy = add_gaussian_noise(clean, plan.noise_sigma, &mut rng)?;
        let denoised =
            Image::from_tensor(&forward(model, &noisy.to_tensor::<f32>())?)?.clipped();
        psnr_sum += psnr(&denoised, clean, 1.0)?;
        ssim_sum += ssim(&denoised, clean)?;
    }
    let n = images.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let plan = TrainPlan::default();
        assert_eq!(cosine_lr(0, &plan).unwrap(), 3e-4);
        assert_eq!(cosine_lr(plan.total_iters, &plan).unwrap(), 1e-6);
        let mid = cosine_lr(plan.total_iters / 2, &plan).unwrap();
        assert!((mid - 1.505e-4).abs() < 1e-9, "{mid}");
        assert!(matches!(
            cosine_lr(plan.total_iters + 1, &plan),
            Err(XError::Usage(_))
        ));
    }

    #[test]
    fn cosine_is_monotone_nonincreasing() {
        let plan = TrainPlan::default();
        let mut last = f64::INFINITY;
        for i in (0..=plan.total_iters).step_by(1000) {
            let lr = cosine_lr(i, &plan).unwrap();
            assert!(lr <= last + 1e-18);
            last = lr;
        }
    }

    #[test]
    fn progressive_phase_boundaries() {
        let plan = TrainPlan::default();
        assert_eq!(progressive_lookup(0, &plan), (64, 128));
        assert_eq!(progressive_lookup(91_999, &plan), (64, 128));
        assert_eq!(progressive_lookup(92_000, &plan), (40, 160));
        assert_eq!(progressive_lookup(156_000, &plan), (32, 192));
        assert_eq!(progressive_lookup(204_000, &plan), (16, 256));
        assert_eq!(progressive_lookup(240_000, &plan), (8, 320));
        assert_eq!(progressive_lookup(276_000, &plan), (8, 384));
        assert_eq!(progressive_lookup(299_999, &plan), (8, 384));
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::from_vec(&[2], vec![0.0f64, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![1.0f64, 3.0]).unwrap();
        assert_eq!(l1_loss(&a, &b).unwrap().item(), 1.5);
        assert_eq!(l1_loss(&a, &a).unwrap().item(), 0.0);
        let c = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let d = Tensor::from_vec(&[3], vec![0.3f64, 1.3, 2.3]).unwrap();
        assert!((l1_loss(&c, &d).unwrap().item() - 0.7).abs() < 1e-12);
        assert!(matches!(l1_loss(&a, &c), Err(XError::Dim(_))));
    }

    #[test]
    fn adamw_pure_decay_with_zero_gradients() {
        let p = Tensor::param(&[2], vec![1.0f64, -2.0]).unwrap();
        let params = vec![p.clone()];
        let mut state = OptimizerState::new(&params);
        let plan = TrainPlan {
            weight_decay: 1e-2,
            ..TrainPlan::default()
        };
        adamw_step(&params, &mut state, 0.1, &plan).unwrap();
        let factor = 1.0 - 0.1 * 1e-2;
        let got = p.data();
        assert!((got[0] - factor).abs() < 1e-12);
        assert!((got[1] + 2.0 * factor).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let p = Tensor::param(&[2], vec![0.0f64, 0.0]).unwrap();
        let params = vec![p.clone()];
        let mut state = OptimizerState::new(&params);
        let plan = TrainPlan {
            weight_decay: 0.0,
            ..TrainPlan::default()
        };
        // plant a constant gradient by hand
        let loss = ops::sum_all(&ops::mul(
            &p,
            &Tensor::from_vec(&[2], vec![3.0f64, -0.5]).unwrap(),
        )
        .unwrap())
        .unwrap();
        loss.backward().unwrap();
        adamw_step(&params, &mut state, 1e-3, &plan).unwrap();
        let got = p.data();
        assert!((got[0] + 1e-3).abs() < 1e-8, "{}", got[0]);
        assert!((got[1] - 1e-3).abs() < 1e-7, "{}", got[1]);
    }

    #[test]
    fn adamw_step_magnitude_is_bounded() {
        let p = Tensor::param(&[1], vec![5.0f64]).unwrap();
        let params = vec![p.clone()];
        let mut state = OptimizerState::new(&params);
        let plan = TrainPlan {
            weight_decay: 0.0,
            ..TrainPlan::default()
        };
        let lr = 1e-2;
        let mut prev = p.data()[0];
        for _ in 0..50 {
            p.zero_grad();
            let loss = ops::scale(&p, 2.5); // constant gradient 2.5
            ops::sum_all(&loss).unwrap().backward().unwrap();
            adamw_step(&params, &mut state, lr, &plan).unwrap();
            let cur = p.data()[0];
            assert!((cur - prev).abs() <= lr * 1.05, "step too large");
            prev = cur;
        }
    }

    #[test]
    fn adamw_identical_calls_are_deterministic() {
        let run = || {
            let p = Tensor::param(&[3], vec![0.5f64, -0.25, 1.5]).unwrap();
            let params = vec![p.clone()];
            let mut state = OptimizerState::new(&params);
            let plan = TrainPlan::default();
            for _ in 0..5 {
                p.zero_grad();
                ops::sum_all(&ops::mul(&p, &p).unwrap())
                    .unwrap()
                    .backward()
                    .unwrap();
                adamw_step(&params, &mut state, 1e-3, &plan).unwrap();
            }
            p.data()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adamw_rejects_non_finite_gradient() {
        let p = Tensor::param(&[1], vec![1.0f64]).unwrap();
        let params = vec![p.clone()];
        let mut state = OptimizerState::new(&params);
        let loss = ops::scale(&p, f64::INFINITY);
        ops::sum_all(&loss).unwrap().backward().unwrap();
        assert!(matches!(
            adamw_step(&params, &mut state, 1e-3, &TrainPlan::default()),
            Err(XError::Numeric(_))
        ));
        assert_eq!(p.data(), vec![1.0]);
    }

    #[test]
    fn noise_statistics() {
        let img = Image::new(100, 100, 1, vec![0.5; 10_000]).unwrap();
        // sigma 0 is the identity
        let mut rng = derive_rng(1, 0);
        assert_eq!(
            add_gaussian_noise(&img, 0.0, &mut rng).unwrap().data,
            img.data
        );
        // a million samples: mean within 3 standard errors, std within 1%
        let big = Image::new(1000, 1000, 1, vec![0.5; 1_000_000]).unwrap();
        let mut rng = derive_rng(2, 0);
        let noisy = add_gaussian_noise(&big, 25.0, &mut rng).unwrap();
        let diffs: Vec<f64> = noisy
            .data
            .iter()
            .zip(&big.data)
            .map(|(a, b)| (*a - *b) as f64)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let sigma = 25.0 / 255.0;
        assert!(mean.abs() < 3.0 * sigma / n.sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() / sigma < 0.01, "std {}", var.sqrt());
        // negative sigma is a usage error
        assert!(matches!(
            add_gaussian_noise(&img, -1.0, &mut rng),
            Err(XError::Usage(_))
        ));
    }

    #[test]
    fn dihedral_group_properties() {
        let img = Image::new(3, 3, 1, (0..9).map(|v| v as f32).collect()).unwrap();
        // identity
        assert_eq!(dihedral(&img, 0).unwrap().data, img.data);
        // horizontal flip twice is the identity
        let f = dihedral(&img, 4).unwrap();
        assert_eq!(dihedral(&f, 4).unwrap().data, img.data);
        // four quarter turns are the identity
        let mut r = img.clone();
        for _ in 0..4 {
            r = dihedral(&r, 1).unwrap();
        }
        assert_eq!(r.data, img.data);
        // every transform preserves the pixel multiset
        for k in 0..8 {
            let t = dihedral(&img, k).unwrap();
            let mut a = t.data.clone();
            let mut b = img.data.clone();
            a.sort_by(f32::total_cmp);
            b.sort_by(f32::total_cmp);
            assert_eq!(a, b, "transform {k}");
        }
        // the eight transforms are pairwise distinct on a generic image
        let outputs: Vec<Vec<f32>> = (0..8).map(|k| dihedral(&img, k).unwrap().data).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outputs[i], outputs[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn rotation_of_non_square_is_usage_error() {
        let img = Image::new(2, 3, 1, vec![0.0; 6]).unwrap();
        assert!(matches!(dihedral(&img, 1), Err(XError::Usage(_))));
        assert!(dihedral(&img, 2).is_ok()); // 180 degrees keeps the shape
        assert!(dihedral(&img, 4).is_ok()); // flips keep the shape
    }

    #[test]
    fn derive_rng_streams_are_independent_and_stable() {
        let a: Vec<u32> = {
            let mut r = derive_rng(7, 3);
            (0..4).map(|_| r.gen()).collect()
        };
        let b: Vec<u32> = {
            let mut r = derive_rng(7, 3);
            (0..4).map(|_| r.gen()).collect()
        };
        let c: Vec<u32> = {
            let mut r = derive_rng(7, 4);
            (0..4).map(|_| r.gen()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
