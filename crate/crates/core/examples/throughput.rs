use std::time::Instant;

use klab::model::{EncoderConfig, TrainConfig, Trainer, Variant};
use klab::tensor::DenseArray;
use rand::{Rng, SeedableRng};

fn main() {
    let batch: usize = std::env::args().nth(1).map_or(32, |s| s.parse().unwrap());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let len = 50;
    let mut x = DenseArray::zeros([batch * len, 3]);
    for r in 0..batch * len {
        x.set(r, rng.random_range(0..2), 1.0);
        x.set(r, 2, rng.random_range(0..2) as f64);
    }
    let labels: Vec<usize> = (0..batch).map(|i| i % 9).collect();
    let mut all = vec![Variant::Softmax];
    all.extend(Variant::KERNELIZED);
    for v in all {
        let cfg = EncoderConfig {
            variant: v,
            ..EncoderConfig::default()
        };
        let mut t = Trainer::new(cfg, &TrainConfig::default()).unwrap();
        t.train_step(&x, &labels).unwrap();
        let start = Instant::now();
        let n = 5;
        for _ in 0..n {
            t.train_step(&x, &labels).unwrap();
        }
        let per = start.elapsed().as_secs_f64() / n as f64;
        println!(
            "{v}: {:.1} ms/step, {:.2} ms/example",
            per * 1e3,
            per * 1e3 / batch as f64
        );
    }
}
