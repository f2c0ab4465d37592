//! Shared fixtures: seeded synthetic piecewise-smooth images and dataset
//! directories for training/evaluation tests.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xformer::image_io::{image_write, Image};

/// Synthetic grayscale image mixing smooth gradients, soft disks, hard
/// rectangles, stripe bands, and multi-frequency texture, clamped into a
/// comfortable interior range.
pub fn synth_image(seed: u64, size: usize) -> Image {
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
    for _ in 0..rng.gen_range(4..9) {
        let amp: f32 = rng.gen_range(0.08..0.25) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
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
    for _ in 0..rng.gen_range(1..4) {
        let fy = rng.gen_range(0.2..1.2);
        let fx = rng.gen_range(0.2..1.2);
        let (py, px): (f32, f32) = (rng.gen_range(0.0..6.28), rng.gen_range(0.0..6.28));
        let amp = rng.gen_range(0.02..0.07);
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

/// Writes `count` synthetic PNGs into `dir` (created if needed).
pub fn write_dataset(dir: &Path, first_seed: u64, count: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        let img = synth_image(first_seed + i as u64, size);
        image_write(&img, &dir.join(format!("img{i:03}.png"))).unwrap();
    }
}
