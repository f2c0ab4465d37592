// scratch: probe desk-scale training feasibility
use std::time::Instant;
use xformer::image_io::{image_write, Image};
use xformer::network::XformerConfig;
use xformer::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn synth_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0f32; size * size];
    let (gx, gy): (f32, f32) = (rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4));
    let base: f32 = rng.gen_range(0.35..0.65);
    for y in 0..size {
        for x in 0..size {
            data[y * size + x] =
                base + gx * (x as f32 / size as f32 - 0.5) + gy * (y as f32 / size as f32 - 0.5);
        }
    }
    for _ in 0..6 {
        let amp: f32 = 0.15 * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match rng.gen_range(0..3) {
            0 => {
                // soft disk
                let cy = rng.gen_range(0.0..size as f32);
                let cx = rng.gen_range(0.0..size as f32);
                let r = rng.gen_range(3.0..(size as f32) / 3.0);
                for y in 0..size {
                    for x in 0..size {
                        let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                        if d < r {
                            data[y * size + x] += amp * ((r - d) / 2.0).min(1.0);
                        }
                    }
                }
            }
            1 => {
                // hard-edged rectangle
                let y0 = rng.gen_range(0..size);
                let x0 = rng.gen_range(0..size);
                let hh = rng.gen_range(3..size / 2);
                let ww = rng.gen_range(3..size / 2);
                for y in y0..(y0 + hh).min(size) {
                    for x in x0..(x0 + ww).min(size) {
                        data[y * size + x] += amp;
                    }
                }
            }
            _ => {
                // diagonal stripe band
                let angle: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                let (dy, dx) = (angle.sin(), angle.cos());
                let offset = rng.gen_range(0.0..size as f32);
                let width = rng.gen_range(2.0..(size as f32) / 4.0);
                for y in 0..size {
                    for x in 0..size {
                        let t = (y as f32 * dy + x as f32 * dx - offset).rem_euclid(size as f32);
                        if t < width {
                            data[y * size + x] += amp;
                        }
                    }
                }
            }
        }
    }
    for _ in 0..2 {
        let fy = rng.gen_range(0.2..1.2);
        let fx = rng.gen_range(0.2..1.2);
        let (py, px): (f32, f32) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
        let amp = 0.04;
        for y in 0..size {
            for x in 0..size {
                data[y * size + x] +=
                    amp * (fy * y as f32 + py).sin() * (fx * x as f32 + px).cos();
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.08, 0.92);
    }
    Image::new(size, size, 1, data).unwrap()
}


fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(200);
    let batch: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(2);
    let patch: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(32);

    let dir = std::path::PathBuf::from("/tmp/probe");
    let train_dir = dir.join("train");
    let val_dir = dir.join("val");
    std::fs::create_dir_all(&train_dir).unwrap();
    std::fs::create_dir_all(&val_dir).unwrap();
    for i in 0..40u64 {
        image_write(&synth_image(i, 48), &train_dir.join(format!("t{i:02}.png"))).unwrap();
    }
    for i in 0..5u64 {
        image_write(&synth_image(1000 + i, 48), &val_dir.join(format!("v{i}.png"))).unwrap();
    }

    let cfg = XformerConfig::tiny(1);
    let plan = TrainPlan {
        total_iters: iters,
        progressive: vec![ProgressivePhase { start_iter: 0, batch, patch }],
        lr0: 1e-4,
        noise_sigma: 25.0,
        seed: 7,
        val_interval: 100,
        checkpoint_interval: 100000,
        ..TrainPlan::default()
    };
    let t0 = Instant::now();
    let out = train_loop(&TrainSession {
        config: &cfg,
        plan: &plan,
        data_dir: &train_dir,
        val_dir: Some(&val_dir),
        out_dir: &dir.join("run"),
        resume: None,
        stop_after: None,
    })
    .unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!("iters={iters} batch={batch} patch={patch} time={dt:.1}s ({:.1} ms/iter)", dt * 1000.0 / iters as f64);
    println!("window means: {:?}", out.window_means);
    for (i, p, s) in &out.validations {
        println!("val @ {i}: psnr {p:.3} ssim {s:.4}");
    }
    // noisy baseline psnr on val images
    let imgs = load_image_dir(&val_dir).unwrap();
    let mut noisy_psnr = 0.0;
    for (i, (_, clean)) in imgs.iter().enumerate() {
        let mut rng = derive_rng(plan.seed ^ 0x5641_4c21, i as u64);
        let noisy = add_gaussian_noise(clean, 25.0, &mut rng).unwrap();
        noisy_psnr += xformer::metrics::psnr(&noisy.clipped(), clean, 1.0).unwrap();
    }
    println!("noisy baseline psnr: {:.3}", noisy_psnr / imgs.len() as f64);
}
