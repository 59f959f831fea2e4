//! Decomposes a gradient image into Haar sub-bands, prints per-band energy,
//! and reconstructs it.

use wavenhance::tensor::{Shape, Tensor};
use wavenhance::wavelet::{dwt, idwt};

fn main() {
    let x = Tensor::from_fn(Shape::new(1, 16, 16, 3), |_, y, x, c| {
        0.1 + 0.05 * c as f64 + 0.03 * x as f64 + if (y / 4) % 2 == 0 { 0.1 } else { 0.0 }
    });
    let bands = dwt(&x).unwrap();
    let mut band_energy = 0.0;
    for (band, t) in bands.iter() {
        let e = t.sum_of_squares();
        band_energy += e;
        println!("{:>2}: shape {:?}  energy {:.6}", band.name(), t.shape(), e);
    }
    println!("image energy {:.6}, sum of bands {:.6}", x.sum_of_squares(), band_energy);
    let back = idwt(&bands).unwrap();
    println!("max reconstruction error {:.3e}", back.max_abs_diff(&x).unwrap());
}
