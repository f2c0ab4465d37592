// scratch: replicate the acceptance full-net gradcheck across seeds and
// report any coordinate whose FD mismatch exceeds 1e-4, with h-scaling.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xformer::network::{build, collect_params, forward, XformerConfig};
use xformer::tensor::{ops, Tensor};

fn rv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

fn main() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        // burn the same amount of rng state the earlier block checks consume?
        // not needed for correctness: probe ALL tensors, 2 coords each.
        let cfg = XformerConfig {
            in_channels: 1,
            base_channels: 4,
            depths: [1; 7],
            heads: [1, 2, 4, 8, 4, 2, 1],
            refinement_depth: 1,
            refinement_heads: 1,
            window: 2,
            ..XformerConfig::default()
        };
        let model = build::<f64>(&cfg, 2000 + seed).unwrap();
        let params = collect_params(&model);
        let img = Tensor::from_vec(&[8, 8, 1], rv(&mut rng, 64)).unwrap();
        let coef = Tensor::from_vec(&[8, 8, 1], rv(&mut rng, 64)).unwrap();
        let loss =
            || ops::sum_all(&ops::mul(&forward(&model, &img).unwrap(), &coef).unwrap()).unwrap();
        for (_, t) in &params {
            t.zero_grad();
        }
        loss().backward().unwrap();
        let mut worst = 0.0f64;
        for (name, t) in &params {
            let a = t.grad_or_zeros();
            for _ in 0..2 {
                let j = rng.gen_range(0..t.numel());
                let mut rels = Vec::new();
                for h in [1e-4, 1e-5] {
                    let mut d = t.data();
                    let orig = d[j];
                    d[j] = orig + h;
                    t.set_data(d.clone()).unwrap();
                    let fp = loss().item();
                    d[j] = orig - h;
                    t.set_data(d.clone()).unwrap();
                    let fm = loss().item();
                    d[j] = orig;
                    t.set_data(d).unwrap();
                    let num = (fp - fm) / (2.0 * h);
                    rels.push((a[j] - num).abs() / a[j].abs().max(num.abs()).max(1e-4));
                }
                worst = worst.max(rels[0]);
                if rels[0] > 1e-4 {
                    println!(
                        "seed {seed} {name}[{j}]: analytic {:+.6e} rel(h=1e-4) {:.2e} rel(h=1e-5) {:.2e}",
                        a[j], rels[0], rels[1]
                    );
                }
            }
        }
        println!("seed {seed}: worst rel at h=1e-4: {worst:.2e}");
    }
}
