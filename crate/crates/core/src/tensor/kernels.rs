//! Eager numeric kernels shared by the graph and by non-differentiable code
//! paths (metrics, inference).
//!
//! Parallel kernels partition work by output rows so every output element is
//! accumulated in a fixed order, independent of thread count.

use rayon::prelude::*;

use super::{Result, Shape, Tensor, TensorError};

/// Spatial padding mode for [`conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    /// Zero padding that keeps `ceil(H / stride)` rows.
    Same,
}

/// Border handling for fixed depthwise filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Zero,
    /// Mirror without repeating the edge sample (`dcb|abcd|cba`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Mirror index into `[0, n)`. Valid for `-n < i < 2n - 1`.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

pub(crate) fn conv_geometry(
    input: Shape,
    kernel: Shape,
    bias: Option<Shape>,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeom> {
    let op = "conv2d";
    if input.is_empty() {
        return Err(TensorError::Empty { op });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    // Kernel layout is [kh, kw, cin, cout].
    let (kh, kw, cin, cout) = (kernel.n, kernel.h, kernel.w, kernel.c);
    if kernel.is_empty() {
        return Err(TensorError::Empty { op });
    }
    if cin != input.c {
        return Err(TensorError::Dimension {
            op,
            detail: format!(
                "kernel expects {cin} input channels but input {input} has {}",
                input.c
            ),
        });
    }
    if let Some(b) = bias {
        if b != Shape::new(1, 1, 1, cout) {
            return Err(TensorError::Dimension {
                op,
                detail: format!("bias shape {b} does not match {cout} output channels"),
            });
        }
    }
    let (out_h, out_w, pad_top, pad_left) = match padding {
        Padding::Valid => {
            if kh > input.h || kw > input.w {
                return Err(TensorError::Dimension {
                    op,
                    detail: format!("kernel {kh}x{kw} larger than input {}x{}", input.h, input.w),
                });
            }
            ((input.h - kh) / stride + 1, (input.w - kw) / stride + 1, 0, 0)
        }
        Padding::Same => {
            let oh = input.h.div_ceil(stride);
            let ow = input.w.div_ceil(stride);
            let ph = ((oh - 1) * stride + kh).saturating_sub(input.h);
            let pw = ((ow - 1) * stride + kw).saturating_sub(input.w);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    Ok(ConvGeom {
        kh,
        kw,
        cin,
        cout,
        stride,
        pad_top,
        pad_left,
        out_h,
        out_w,
    })
}

#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + k) as isize - pad as isize;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

/// 2-D cross-correlation. `kernel` is laid out `[kh, kw, cin, cout]`; `bias`
/// is `[1, 1, 1, cout]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let g = conv_geometry(
        input.shape(),
        kernel.shape(),
        bias.map(Tensor::shape),
        stride,
        padding,
    )?;
    Ok(conv2d_with(input, kernel, bias, &g))
}

pub(crate) fn conv2d_with(input: &Tensor, kernel: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let s = input.shape();
    let out_shape = Shape::new(s.n, g.out_h, g.out_w, g.cout);
    let mut out = vec![0.0; out_shape.len()];
    let x = input.data();
    let k = kernel.data();
    let row_len = g.out_w * g.cout;
    out.par_chunks_mut(row_len).enumerate().for_each(|(row, buf)| {
        let (n, oy) = (row / g.out_h, row % g.out_h);
        for ox in 0..g.out_w {
            let acc = &mut buf[ox * g.cout..(ox + 1) * g.cout];
            if let Some(b) = bias {
                acc.copy_from_slice(b.data());
            }
            for ky in 0..g.kh {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_top, s.h) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_left, s.w) else {
                        continue;
                    };
                    let xo = s.offset(n, iy, ix, 0);
                    let ko = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[xo + ci];
                        let krow = &k[ko + ci * g.cout..ko + (ci + 1) * g.cout];
                        for (a, &w) in acc.iter_mut().zip(krow) {
                            *a += xv * w;
                        }
                    }
                }
            }
        }
    });
    Tensor::new(out_shape, out).expect("conv output sized from geometry")
}

/// Gradient of a convolution with respect to its input.
pub(crate) fn conv2d_grad_input(grad: &Tensor, kernel: &Tensor, input_shape: Shape, g: &ConvGeom) -> Tensor {
    let s = input_shape;
    let gs = grad.shape();
    let gd = grad.data();
    let k = kernel.data();
    let mut out = vec![0.0; s.len()];
    let row_len = s.w * s.c;
    out.par_chunks_mut(row_len).enumerate().for_each(|(row, buf)| {
        let (n, iy) = (row / s.h, row % s.h);
        for ky in 0..g.kh {
            let t = iy as isize + g.pad_top as isize - ky as isize;
            if t < 0 || t as usize % g.stride != 0 {
                continue;
            }
            let oy = t as usize / g.stride;
            if oy >= g.out_h {
                continue;
            }
            for ix in 0..s.w {
                let acc = &mut buf[ix * s.c..(ix + 1) * s.c];
                for kx in 0..g.kw {
                    let t = ix as isize + g.pad_left as isize - kx as isize;
                    if t < 0 || t as usize % g.stride != 0 {
                        continue;
                    }
                    let ox = t as usize / g.stride;
                    if ox >= g.out_w {
                        continue;
                    }
                    let go = gs.offset(n, oy, ox, 0);
                    let grow = &gd[go..go + g.cout];
                    let ko = (ky * g.kw + kx) * g.cin * g.cout;
                    for (ci, a) in acc.iter_mut().enumerate() {
                        let krow = &k[ko + ci * g.cout..ko + (ci + 1) * g.cout];
                        *a += grow.iter().zip(krow).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
            }
        }
    });
    Tensor::new(s, out).expect("input-shaped gradient")
}

/// Gradient of a convolution with respect to its kernel.
pub(crate) fn conv2d_grad_kernel(grad: &Tensor, input: &Tensor, kernel_shape: Shape, g: &ConvGeom) -> Tensor {
    let s = input.shape();
    let gs = grad.shape();
    let gd = grad.data();
    let x = input.data();
    let mut out = vec![0.0; kernel_shape.len()];
    out.par_chunks_mut(g.cout).enumerate().for_each(|(idx, acc)| {
        let ci = idx % g.cin;
        let kx = (idx / g.cin) % g.kw;
        let ky = idx / (g.cin * g.kw);
        for n in 0..s.n {
            for oy in 0..g.out_h {
                let Some(iy) = tap(oy, ky, g.stride, g.pad_top, s.h) else {
                    continue;
                };
                for ox in 0..g.out_w {
                    let Some(ix) = tap(ox, kx, g.stride, g.pad_left, s.w) else {
                        continue;
                    };
                    let xv = x[s.offset(n, iy, ix, ci)];
                    let go = gs.offset(n, oy, ox, 0);
                    for (a, &gv) in acc.iter_mut().zip(&gd[go..go + g.cout]) {
                        *a += xv * gv;
                    }
                }
            }
        }
    });
    Tensor::new(kernel_shape, out).expect("kernel-shaped gradient")
}

pub(crate) fn conv2d_grad_bias(grad: &Tensor) -> Tensor {
    let c = grad.shape().c;
    let mut out = vec![0.0; c];
    for px in grad.data().chunks(c) {
        for (a, v) in out.iter_mut().zip(px) {
            *a += v;
        }
    }
    Tensor::new(Shape::new(1, 1, 1, c), out).expect("bias-shaped gradient")
}

/// A fixed square filter applied to each channel independently.
#[derive(Clone, Debug, PartialEq)]
pub struct Filter2d {
    size: usize,
    weights: Vec<f64>,
}

impl Filter2d {
    /// `weights` row-major, `size * size` entries, `size` odd.
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || weights.len() != size * size {
            return Err(TensorError::InvalidArgument(format!(
                "filter must be odd-sized and square, got size {size} with {} weights",
                weights.len()
            )));
        }
        Ok(Filter2d { size, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, ky: usize, kx: usize) -> f64 {
        self.weights[ky * self.size + kx]
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn transpose(&self) -> Filter2d {
        let k = self.size;
        let weights = (0..k * k).map(|i| self.at(i % k, i / k)).collect();
        Filter2d { size: k, weights }
    }

    pub(crate) fn check(&self, s: Shape, pad: Pad) -> Result<()> {
        let r = self.size / 2;
        if s.is_empty() {
            return Err(TensorError::Empty { op: "filter2d" });
        }
        if pad == Pad::Reflect && (r >= s.h.max(2) || r >= s.w.max(2)) {
            return Err(TensorError::Dimension {
                op: "filter2d",
                detail: format!("reflect padding of radius {r} needs at least {} rows and columns, got {s}", r + 1),
            });
        }
        Ok(())
    }
}

#[inline]
fn source(i: isize, n: usize, pad: Pad) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        return Some(i as usize);
    }
    match pad {
        Pad::Zero => None,
        Pad::Reflect => Some(reflect(i, n)),
    }
}

/// Same-size depthwise filtering.
pub fn filter2d(input: &Tensor, filter: &Filter2d, pad: Pad) -> Result<Tensor> {
    filter.check(input.shape(), pad)?;
    Ok(filter2d_unchecked(input, filter, pad))
}

pub(crate) fn filter2d_unchecked(input: &Tensor, f: &Filter2d, pad: Pad) -> Tensor {
    let s = input.shape();
    let r = (f.size / 2) as isize;
    let x = input.data();
    let mut out = vec![0.0; s.len()];
    let row_len = s.w * s.c;
    out.par_chunks_mut(row_len).enumerate().for_each(|(row, buf)| {
        let (n, y) = (row / s.h, row % s.h);
        for ky in 0..f.size {
            let Some(sy) = source(y as isize + ky as isize - r, s.h, pad) else {
                continue;
            };
            for kx in 0..f.size {
                let w = f.at(ky, kx);
                if w == 0.0 {
                    continue;
                }
                for xo in 0..s.w {
                    let Some(sx) = source(xo as isize + kx as isize - r, s.w, pad) else {
                        continue;
                    };
                    let so = s.offset(n, sy, sx, 0);
                    for (a, v) in buf[xo * s.c..(xo + 1) * s.c].iter_mut().zip(&x[so..so + s.c]) {
                        *a += w * v;
                    }
                }
            }
        }
    });
    Tensor::new(s, out).expect("same-size filter output")
}

/// Adjoint of [`filter2d`]: scatters each output gradient back to the
/// samples that produced it.
pub(crate) fn filter2d_adjoint(grad: &Tensor, f: &Filter2d, pad: Pad) -> Tensor {
    let s = grad.shape();
    let r = (f.size / 2) as isize;
    let g = grad.data();
    let mut out = vec![0.0; s.len()];
    let per = s.h * s.w * s.c;
    out.par_chunks_mut(per).enumerate().for_each(|(n, buf)| {
        for y in 0..s.h {
            for ky in 0..f.size {
                let Some(sy) = source(y as isize + ky as isize - r, s.h, pad) else {
                    continue;
                };
                for kx in 0..f.size {
                    let w = f.at(ky, kx);
                    if w == 0.0 {
                        continue;
                    }
                    for xo in 0..s.w {
                        let Some(sx) = source(xo as isize + kx as isize - r, s.w, pad) else {
                            continue;
                        };
                        let go = s.offset(n, y, xo, 0);
                        let so = (sy * s.w + sx) * s.c;
                        for c in 0..s.c {
                            buf[so + c] += w * g[go + c];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(s, out).expect("same-size filter gradient")
}

pub(crate) fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for (i, (&x, &y)) in a.dims().iter().zip(b.dims().iter()).enumerate() {
        out[i] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b });
        };
    }
    Ok(Shape::from_dims(out))
}

fn strides(s: Shape, out: Shape) -> [usize; 4] {
    let full = [s.h * s.w * s.c, s.w * s.c, s.c, 1];
    let d = s.dims();
    let o = out.dims();
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if d[i] == 1 && o[i] != 1 { 0 } else { full[i] };
    }
    st
}

/// Applies `f` element-wise with size-1 dimensions broadcast.
pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(op, a.shape(), b.shape())?;
    let sa = strides(a.shape(), out);
    let sb = strides(b.shape(), out);
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.len());
    for n in 0..out.n {
        for y in 0..out.h {
            for x in 0..out.w {
                let ia = n * sa[0] + y * sa[1] + x * sa[2];
                let ib = n * sb[0] + y * sb[1] + x * sb[2];
                for c in 0..out.c {
                    data.push(f(ad[ia + c * sa[3]], bd[ib + c * sb[3]]));
                }
            }
        }
    }
    Tensor::new(out, data)
}

/// Sums `grad` over the dimensions along which `target` was broadcast.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: Shape) -> Tensor {
    if grad.shape() == target {
        return grad.clone();
    }
    let out = grad.shape();
    let st = strides(target, out);
    let mut data = vec![0.0; target.len()];
    let g = grad.data();
    let mut i = 0;
    for n in 0..out.n {
        for y in 0..out.h {
            for x in 0..out.w {
                let base = n * st[0] + y * st[1] + x * st[2];
                for c in 0..out.c {
                    data[base + c * st[3]] += g[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::new(target, data).expect("reduced gradient")
}

pub(crate) fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(TensorError::Empty { op: "concat" })?.shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: first,
                rhs: s,
            });
        }
        c_total += s.c;
    }
    let out = Shape::new(first.n, first.h, first.w, c_total);
    let mut data = Vec::with_capacity(out.len());
    let pixels = first.n * first.h * first.w;
    for px in 0..pixels {
        for p in parts {
            let c = p.shape().c;
            data.extend_from_slice(&p.data()[px * c..(px + 1) * c]);
        }
    }
    Tensor::new(out, data)
}

pub(crate) fn slice_channels(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let s = t.shape();
    if start + len > s.c || len == 0 {
        return Err(TensorError::Dimension {
            op: "slice_channels",
            detail: format!("channels {start}..{} out of range for {s}", start + len),
        });
    }
    let out = Shape::new(s.n, s.h, s.w, len);
    let mut data = Vec::with_capacity(out.len());
    for px in t.data().chunks(s.c) {
        data.extend_from_slice(&px[start..start + len]);
    }
    Tensor::new(out, data)
}
