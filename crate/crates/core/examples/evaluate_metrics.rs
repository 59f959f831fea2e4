//! Scores progressively noisier copies of an image with PSNR and windowed
//! SSIM and prints the report as CSV.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavenhance::metrics::evaluate_pairs;
use wavenhance::tensor::{Shape, Tensor};

fn main() {
    let reference = Tensor::from_fn(Shape::new(1, 48, 48, 3), |_, y, x, c| {
        0.5 + 0.3 * ((x as f64 * 0.3).sin() * (y as f64 * 0.2 + c as f64).cos())
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pairs: Vec<_> = [0.0, 0.01, 0.05, 0.1]
        .iter()
        .map(|&amp| {
            let noisy = if amp > 0.0 {
                let noise = Tensor::random_uniform(reference.shape(), -amp, amp, &mut rng);
                reference.zip_map(&noise, |a, b| (a + b).clamp(0.0, 1.0)).unwrap()
            } else {
                reference.clone()
            };
            (format!("noise_{amp}"), noisy, reference.clone())
        })
        .collect();
    print!("{}", evaluate_pairs(&pairs).unwrap().to_csv());
}
