//! Trains a tiny network on a single synthetic 64x64 pair and reports how
//! far the loss and PSNR move in 200 steps.

use std::time::Instant;

use wavenhance::dataio::ImagePair;
use wavenhance::metrics::psnr;
use wavenhance::network::{enhance, NetworkConfig};
use wavenhance::tensor::{Shape, Tensor};
use wavenhance::training::{train, TrainConfig, TrainOptions};

fn synthetic_pair(size: usize) -> ImagePair {
    let reference = Tensor::from_fn(Shape::new(1, size, size, 3), |_, y, x, c| {
        let (fy, fx) = (y as f64 / size as f64, x as f64 / size as f64);
        let base = 0.25 + 0.4 * fx + 0.2 * fy;
        let texture = 0.08 * ((fx * 9.0 + c as f64).sin() * (fy * 7.0).cos());
        (base + texture + 0.05 * c as f64).clamp(0.0, 1.0)
    });
    let low = reference.map(|v| 0.25 * v);
    ImagePair {
        name: "synthetic".into(),
        low,
        reference,
    }
}

fn main() {
    let pair = synthetic_pair(64);
    let cfg = TrainConfig {
        network: NetworkConfig {
            levels: 2,
            base_channels: 8,
            ..NetworkConfig::default()
        },
        options: TrainOptions {
            epochs: 200,
            patch: 64,
            seed: 7,
            augment: false,
            deterministic: true,
            ..TrainOptions::default()
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let out = train(std::slice::from_ref(&pair), &cfg, None).expect("training failed");
    let first = out.history.first().unwrap().values;
    let last = out.history.last().unwrap().values;
    let enhanced = enhance(&pair.low, &out.checkpoint.params, &cfg.network).unwrap();
    println!("steps:        {}", out.history.len());
    println!("initial loss: {:.4e}", first.total);
    println!("final loss:   {:.4e}", last.total);
    println!("input PSNR:   {:.2} dB", psnr(&pair.low, &pair.reference).unwrap());
    println!("output PSNR:  {:.2} dB", psnr(&enhanced, &pair.reference).unwrap());
    println!("final lr:     {:e}", out.checkpoint.adam.lr);
    println!("elapsed:      {:.1?}", t0.elapsed());
}
