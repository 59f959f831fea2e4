//! Backpropagates through a small conv + wavelet pipeline and compares the
//! result with central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavenhance::tensor::{grad_check, Padding, Shape, Tensor};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::random_uniform(Shape::new(1, 6, 6, 2), -1.0, 1.0, &mut rng);
    let k = Tensor::random_uniform(Shape::new(3, 3, 2, 2), -0.5, 0.5, &mut rng);

    let err = grad_check(
        |g, x| {
            let k = g.constant(k.clone());
            let y = g.conv2d(x, k, None, 1, Padding::Same)?;
            let y = g.leaky_relu(y, 0.2)?;
            let b = g.dwt(y)?;
            let hh = g.square(b.hh)?;
            let s = g.sum(hh)?;
            let ll = g.mean(b.ll)?;
            g.add(s, ll)
        },
        &x,
        1e-5,
    )
    .unwrap();
    println!("max relative gradient error: {err:.3e}");
}
