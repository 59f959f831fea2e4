use rand::Rng;

use super::TrainError;
use crate::tensor::{Shape, Tensor};

/// One of the eight symmetries of the square: `k` quarter turns
/// counter-clockwise, then an optional left-right mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    pub quarter_turns: u8,
    pub mirror: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral {
        quarter_turns: 0,
        mirror: false,
    };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8u8).map(Dihedral::from_index)
    }

    pub fn from_index(i: u8) -> Dihedral {
        Dihedral {
            quarter_turns: i % 4,
            mirror: (i / 4) % 2 == 1,
        }
    }

    /// Uniform over the eight elements.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Dihedral {
        Dihedral::from_index(rng.random_range(0..8))
    }

    pub fn apply(&self, t: &Tensor) -> Tensor {
        let mut out = t.clone();
        for _ in 0..self.quarter_turns {
            out = rot90(&out);
        }
        if self.mirror {
            out = mirror(&out);
        }
        out
    }

    /// Undoes [`Dihedral::apply`].
    pub fn invert(&self, t: &Tensor) -> Tensor {
        let mut out = if self.mirror { mirror(t) } else { t.clone() };
        for _ in 0..(4 - self.quarter_turns) % 4 {
            out = rot90(&out);
        }
        out
    }
}

/// Quarter turn counter-clockwise.
fn rot90(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(Shape::new(s.n, s.w, s.h, s.c), |n, y, x, c| t.get(n, x, s.w - 1 - y, c))
}

fn mirror(t: &Tensor) -> Tensor {
    let s = t.shape();
    Tensor::from_fn(s, |n, y, x, c| t.get(n, y, s.w - 1 - x, c))
}

/// Applies the same random dihedral transform to both images.
pub fn augment<R: Rng + ?Sized>(low: &Tensor, reference: &Tensor, rng: &mut R) -> Result<(Tensor, Tensor), TrainError> {
    if low.shape() != reference.shape() {
        return Err(TrainError::Data(format!(
            "augment needs equal shapes, got {} and {}",
            low.shape(),
            reference.shape()
        )));
    }
    let d = Dihedral::sample(rng);
    Ok((d.apply(low), d.apply(reference)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn img() -> Tensor {
        Tensor::from_fn(Shape::new(1, 3, 4, 2), |_, y, x, c| (y * 100 + x * 10 + c) as f64)
    }

    #[test]
    fn identity_leaves_input() {
        assert_eq!(Dihedral::IDENTITY.apply(&img()), img());
    }

    #[test]
    fn every_element_is_inverted_exactly() {
        for d in Dihedral::all() {
            assert_eq!(d.invert(&d.apply(&img())), img(), "{d:?}");
        }
    }

    #[test]
    fn elements_are_distinct_on_a_square() {
        let sq = Tensor::from_fn(Shape::new(1, 3, 3, 1), |_, y, x, _| (y * 3 + x) as f64);
        let outs: Vec<Tensor> = Dihedral::all().map(|d| d.apply(&sq)).collect();
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(outs[i], outs[j]);
            }
        }
    }

    #[test]
    fn quarter_turn_orientation() {
        // [[1, 2], [3, 4]] turned counter-clockwise is [[2, 4], [1, 3]].
        let t = Tensor::new(Shape::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(rot90(&t).data(), &[2.0, 4.0, 1.0, 3.0]);
    }

    #[test]
    fn pair_gets_the_same_transform() {
        let a = img();
        let b = img().map(|v| v * 2.0);
        let (x, y) = augment(&a, &b, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(x.map(|v| v * 2.0), y);
        let (x2, y2) = augment(&a, &b, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!((x, y), (x2, y2));
        assert!(augment(&a, &Tensor::zeros(Shape::new(1, 2, 2, 2)), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
