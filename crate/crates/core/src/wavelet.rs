//! Single-stage 2-D Haar analysis/synthesis used in place of pooling and
//! up-sampling, plus sub-band range normalization and channel attention.
//!
//! Each 2x2 block `[[a, b], [c, d]]` of every channel maps to
//!
//! ```text
//! LL = ( a + b + c + d) / 2
//! LH = (-a - b + c + d) / 2
//! HL = (-a + b - c + d) / 2
//! HH = ( a - b - c + d) / 2
//! ```
//!
//! The 1/2 scale makes the 4x4 block transform orthonormal and
//! self-inverse, so synthesis is the transpose of analysis.

use crate::tensor::{Graph, Padding, Result, Shape, Tensor, TensorError, Var};

pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    LL,
    LH,
    HL,
    HH,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::LL, Band::LH, Band::HL, Band::HH];

    pub fn name(self) -> &'static str {
        match self {
            Band::LL => "ll",
            Band::LH => "lh",
            Band::HL => "hl",
            Band::HH => "hh",
        }
    }

    /// Unscaled 2x2 analysis filter.
    pub fn filter(self) -> [[f64; 2]; 2] {
        HAAR_FILTERS[self as usize]
    }
}

/// Unscaled analysis filters in `LL, LH, HL, HH` order.
pub const HAAR_FILTERS: [[[f64; 2]; 2]; 4] = [
    [[1.0, 1.0], [1.0, 1.0]],
    [[-1.0, -1.0], [1.0, 1.0]],
    [[-1.0, 1.0], [-1.0, 1.0]],
    [[1.0, -1.0], [-1.0, 1.0]],
];

/// A filter bank whose diagonal filter is `[[1, -1], [1, -1]]`. It equals the
/// negated `HL` filter, so the bank cannot be inverted; kept for comparison.
pub const DEGENERATE_FILTERS: [[[f64; 2]; 2]; 4] = [
    HAAR_FILTERS[0],
    HAAR_FILTERS[1],
    HAAR_FILTERS[2],
    [[1.0, -1.0], [1.0, -1.0]],
];

/// Rows are filters, columns the flattened block `(a, b, c, d)`.
pub fn analysis_matrix(filters: &[[[f64; 2]; 2]; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for (row, f) in m.iter_mut().zip(filters) {
        *row = [f[0][0], f[0][1], f[1][0], f[1][1]];
    }
    m
}

/// The four half-resolution outputs of one analysis stage.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBands<T> {
    pub ll: T,
    pub lh: T,
    pub hl: T,
    pub hh: T,
}

impl<T> SubBands<T> {
    pub fn get(&self, band: Band) -> &T {
        match band {
            Band::LL => &self.ll,
            Band::LH => &self.lh,
            Band::HL => &self.hl,
            Band::HH => &self.hh,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Band, &T) -> U) -> SubBands<U> {
        SubBands {
            ll: f(Band::LL, &self.ll),
            lh: f(Band::LH, &self.lh),
            hl: f(Band::HL, &self.hl),
            hh: f(Band::HH, &self.hh),
        }
    }

    pub fn try_map<U, E>(&self, mut f: impl FnMut(Band, &T) -> std::result::Result<U, E>) -> std::result::Result<SubBands<U>, E> {
        Ok(SubBands {
            ll: f(Band::LL, &self.ll)?,
            lh: f(Band::LH, &self.lh)?,
            hl: f(Band::HL, &self.hl)?,
            hh: f(Band::HH, &self.hh)?,
        })
    }

    /// Items in `LL, LH, HL, HH` order.
    pub fn iter(&self) -> impl Iterator<Item = (Band, &T)> {
        Band::ALL.into_iter().map(move |b| (b, self.get(b)))
    }
}

pub(crate) fn check_even(s: Shape) -> Result<()> {
    if s.h % 2 != 0 || s.w % 2 != 0 || s.is_empty() {
        return Err(TensorError::Dimension {
            op: "dwt",
            detail: format!("spatial size {}x{} must be even and non-zero; pad the input first", s.h, s.w),
        });
    }
    Ok(())
}

/// One band of the analysis stage, `[N, H/2, W/2, C]`.
pub(crate) fn analysis_band(x: &Tensor, band: Band) -> Tensor {
    let s = x.shape();
    let f = band.filter();
    let out = Shape::new(s.n, s.h / 2, s.w / 2, s.c);
    Tensor::from_fn(out, |n, y, xo, c| {
        let (y0, x0) = (2 * y, 2 * xo);
        0.5 * (f[0][0] * x.get(n, y0, x0, c)
            + f[0][1] * x.get(n, y0, x0 + 1, c)
            + f[1][0] * x.get(n, y0 + 1, x0, c)
            + f[1][1] * x.get(n, y0 + 1, x0 + 1, c))
    })
}

/// Transpose of [`analysis_band`]: spreads each coefficient back over its
/// 2x2 block.
pub(crate) fn analysis_band_adjoint(g: &Tensor, band: Band) -> Tensor {
    let s = g.shape();
    let f = band.filter();
    let out = Shape::new(s.n, s.h * 2, s.w * 2, s.c);
    Tensor::from_fn(out, |n, y, x, c| 0.5 * f[y % 2][x % 2] * g.get(n, y / 2, x / 2, c))
}

/// Haar analysis of every channel. Errors on odd height or width.
pub fn dwt(x: &Tensor) -> Result<SubBands<Tensor>> {
    check_even(x.shape())?;
    Ok(SubBands {
        ll: analysis_band(x, Band::LL),
        lh: analysis_band(x, Band::LH),
        hl: analysis_band(x, Band::HL),
        hh: analysis_band(x, Band::HH),
    })
}

/// Exact inverse of [`dwt`].
pub fn idwt(b: &SubBands<Tensor>) -> Result<Tensor> {
    let s = b.ll.shape();
    for (_, t) in b.iter() {
        if t.shape() != s {
            return Err(TensorError::ShapeMismatch {
                op: "idwt",
                lhs: s,
                rhs: t.shape(),
            });
        }
    }
    if s.is_empty() {
        return Err(TensorError::Empty { op: "idwt" });
    }
    let out = Shape::new(s.n, s.h * 2, s.w * 2, s.c);
    Ok(Tensor::from_fn(out, |n, y, x, c| {
        let (i, j) = (y / 2, x / 2);
        let coeffs = [
            b.ll.get(n, i, j, c),
            b.lh.get(n, i, j, c),
            b.hl.get(n, i, j, c),
            b.hh.get(n, i, j, c),
        ];
        let acc: f64 = coeffs
            .iter()
            .zip(HAAR_FILTERS.iter())
            .map(|(v, f)| f[y % 2][x % 2] * v)
            .sum();
        0.5 * acc
    }))
}

/// Affine map sending each band's theoretical range for inputs in
/// `[0, vmax]` onto `[0, 1]`: `LL / 2vmax` and `(X + vmax) / 2vmax`.
pub fn normalize_subbands(b: &SubBands<Tensor>, vmax: f64) -> SubBands<Tensor> {
    b.map(|band, t| match band {
        Band::LL => t.map(|v| v / (2.0 * vmax)),
        _ => t.map(|v| (v + vmax) / (2.0 * vmax)),
    })
}

/// Inverse of [`normalize_subbands`].
pub fn denormalize_subbands(b: &SubBands<Tensor>, vmax: f64) -> SubBands<Tensor> {
    b.map(|band, t| match band {
        Band::LL => t.map(|v| v * (2.0 * vmax)),
        _ => t.map(|v| v * (2.0 * vmax) - vmax),
    })
}

/// Graph version of [`normalize_subbands`].
pub fn normalize_vars(g: &mut Graph, b: &SubBands<Var>, vmax: f64) -> Result<SubBands<Var>> {
    b.try_map(|band, &v| match band {
        Band::LL => g.scale(v, 1.0 / (2.0 * vmax)),
        _ => {
            let shifted = g.add_scalar(v, vmax)?;
            g.scale(shifted, 1.0 / (2.0 * vmax))
        }
    })
}

/// Graph version of [`denormalize_subbands`].
pub fn denormalize_vars(g: &mut Graph, b: &SubBands<Var>, vmax: f64) -> Result<SubBands<Var>> {
    b.try_map(|band, &v| {
        let scaled = g.scale(v, 2.0 * vmax)?;
        match band {
            Band::LL => Ok(scaled),
            _ => g.add_scalar(scaled, -vmax),
        }
    })
}

/// Squeeze-and-excitation weights, one pair per sub-band.
///
/// Squeeze kernels are `[1, 1, C, C/r]`, excite kernels `[1, 1, C/r, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBandAttention {
    pub squeeze: SubBands<Tensor>,
    pub excite: SubBands<Tensor>,
    pub reduction: usize,
}

pub fn attention_hidden(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || channels % reduction != 0 {
        return Err(TensorError::InvalidArgument(format!(
            "attention reduction {reduction} must divide channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

impl SubBandAttention {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self> {
        let hidden = attention_hidden(channels, reduction)?;
        let sq = Tensor::zeros(Shape::new(1, 1, channels, hidden));
        let ex = Tensor::zeros(Shape::new(1, 1, hidden, channels));
        Ok(SubBandAttention {
            squeeze: SubBands {
                ll: sq.clone(),
                lh: sq.clone(),
                hl: sq.clone(),
                hh: sq,
            },
            excite: SubBands {
                ll: ex.clone(),
                lh: ex.clone(),
                hl: ex.clone(),
                hh: ex,
            },
            reduction,
        })
    }

    pub fn channels(&self) -> usize {
        self.squeeze.ll.shape().w
    }
}

/// Channel-wise gating of each band followed by concatenation in
/// `LL, LH, HL, HH` order. `weights` pairs each band with its
/// `(squeeze, excite)` kernels.
pub fn attend_vars(g: &mut Graph, bands: &SubBands<Var>, weights: &SubBands<(Var, Var)>) -> Result<Var> {
    let mut scaled = Vec::with_capacity(4);
    for (band, &x) in bands.iter() {
        let &(squeeze, excite) = weights.get(band);
        let c = g.shape(x).c;
        let (sq, ex) = (g.shape(squeeze), g.shape(excite));
        if sq.w != c || ex.c != c || sq.c != ex.w {
            return Err(TensorError::Dimension {
                op: "attend_subbands",
                detail: format!("band {} has {c} channels but attention weights are {sq} / {ex}", band.name()),
            });
        }
        let pooled = g.spatial_mean(x)?;
        let hidden = g.conv2d(pooled, squeeze, None, 1, Padding::Valid)?;
        let hidden = g.leaky_relu(hidden, ATTENTION_SLOPE)?;
        let gate = g.conv2d(hidden, excite, None, 1, Padding::Valid)?;
        let gate = g.sigmoid(gate)?;
        scaled.push(g.mul(x, gate)?);
    }
    g.concat_channels(&scaled)
}

/// Eager form of [`attend_vars`]: `[N, H, W, C]` bands to `[N, H, W, 4C]`.
pub fn attend_subbands(b: &SubBands<Tensor>, a: &SubBandAttention) -> Result<Tensor> {
    let mut g = Graph::new();
    let bands = b.map(|_, t| g.constant(t.clone()));
    let weights = a
        .squeeze
        .map(|band, sq| (g.constant(sq.clone()), g.constant(a.excite.get(band).clone())));
    let out = attend_vars(&mut g, &bands, &weights)?;
    Ok(g.value(out).clone())
}
