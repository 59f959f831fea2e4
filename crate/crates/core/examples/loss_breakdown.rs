//! Prints each term of the composite objective for a dark input, a
//! half-way correction and the reference itself.

use wavenhance::losses::{evaluate, LossConfig, PerceptualExtractor};
use wavenhance::tensor::{Shape, Tensor};

fn main() {
    let gt = Tensor::from_fn(Shape::new(1, 32, 32, 3), |_, y, x, c| {
        (0.2 + 0.02 * x as f64 + 0.01 * y as f64 + 0.05 * c as f64).min(1.0)
    });
    let ext = PerceptualExtractor::default();
    let cfg = LossConfig::default();
    println!("{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}", "input", "total", "pixel", "global", "edge", "channel");
    for (name, scale) in [("dark", 0.2), ("halfway", 0.6), ("reference", 1.0)] {
        let e = gt.map(|v| v * scale);
        let v = evaluate(&e, &gt, &ext, &cfg).unwrap();
        println!(
            "{name:<10} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e}",
            v.total, v.pixel, v.global, v.edge, v.channel
        );
    }
}
