//! Dense rank-4 tensors in NHWC layout and a tape-based reverse-mode
//! autodiff engine over them.

mod graph;
mod gradcheck;
pub mod kernels;

use std::fmt;

use rand::Rng;

pub use gradcheck::grad_check;
pub use graph::{Graph, Unary, Var};
pub use kernels::{Filter2d, Padding, Pad};

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs} and {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("expected a scalar tensor, got shape {0}")]
    NotScalar(Shape),
    #[error("backward already ran on this graph; build a new graph for the next step")]
    BackwardTwice,
    #[error("loss does not depend on any tensor that requires a gradient")]
    Detached,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Batch, height, width, channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape {
        n: 1,
        h: 1,
        w: 1,
        c: 1,
    };

    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    pub const fn len(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }

    pub fn from_dims(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }

    #[inline]
    pub const fn offset(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        ((n * self.h + y) * self.w + x) * self.c + c
    }

    pub const fn is_scalar(&self) -> bool {
        self.len() == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.h, self.w, self.c)
    }
}

/// Row-major NHWC array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
                expected: shape.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::SCALAR, value)
    }

    /// Builds a tensor by evaluating `f(n, y, x, c)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.shape.offset(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: f64) {
        let i = self.shape.offset(n, y, x, c);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape))
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape,
                rhs: other.shape,
            });
        }
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self
            .zip_map(other, |a, b| (a - b).abs())?
            .data
            .into_iter()
            .fold(0.0, f64::max))
    }

    /// Single image `n` of the batch as its own `[1, H, W, C]` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let per = self.shape.h * self.shape.w * self.shape.c;
        Tensor {
            shape: Shape::new(1, self.shape.h, self.shape.w, self.shape.c),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or(TensorError::Empty { op: "stack" })?;
        let s = first.shape;
        let mut data = Vec::with_capacity(s.len() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            if (ts.h, ts.w, ts.c) != (s.h, s.w, s.c) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: s,
                    rhs: ts,
                });
            }
            n += ts.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: Shape::new(n, s.h, s.w, s.c),
            data,
        })
    }

    /// Spatial window `[y0, y0+h) x [x0, x0+w)` of every sample.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
        let s = self.shape;
        if y0 + h > s.h || x0 + w > s.w {
            return Err(TensorError::Dimension {
                op: "crop",
                detail: format!("window {h}x{w} at ({y0}, {x0}) exceeds {s}"),
            });
        }
        let out = Shape::new(s.n, h, w, s.c);
        Ok(Tensor::from_fn(out, |n, y, x, c| self.get(n, y0 + y, x0 + x, c)))
    }

    /// Extends the bottom and right edges by mirror reflection (edge sample
    /// not repeated).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Tensor> {
        let s = self.shape;
        if (bottom > 0 && bottom >= s.h) || (right > 0 && right >= s.w) {
            return Err(TensorError::Dimension {
                op: "pad_reflect",
                detail: format!("cannot reflect-pad {s} by ({bottom}, {right})"),
            });
        }
        let out = Shape::new(s.n, s.h + bottom, s.w + right, s.c);
        Ok(Tensor::from_fn(out, |n, y, x, c| {
            self.get(n, kernels::reflect(y as isize, s.h), kernels::reflect(x as isize, s.w), c)
        }))
    }
}
