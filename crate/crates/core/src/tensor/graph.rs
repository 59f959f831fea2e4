use std::rc::Rc;

use super::kernels::{self, ConvGeom, Filter2d, Pad, Padding};
use super::{Result, Shape, Tensor, TensorError};
use crate::wavelet::{self, Band, SubBands};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Element-wise single-input operations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    LeakyRelu(f64),
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
    Abs,
    Square,
    /// Huber-style loss on the value itself, threshold `beta`.
    SmoothL1(f64),
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Unary::Clamp(lo, hi) => x.clamp(lo, hi),
            Unary::Scale(s) => s * x,
            Unary::AddScalar(s) => x + s,
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::SmoothL1(beta) => crate::losses::smooth_l1(x, beta),
        }
    }

    /// d(out)/d(in) given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Unary::Clamp(lo, hi) => {
                if (lo..=hi).contains(&x) {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Scale(s) => s,
            Unary::AddScalar(_) => 1.0,
            Unary::Abs => signum0(x),
            Unary::Square => 2.0 * x,
            Unary::SmoothL1(beta) => {
                if x.abs() < beta {
                    x / beta
                } else {
                    signum0(x)
                }
            }
        }
    }
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Reduce {
    Sum,
    Mean,
    /// Sum over H and W, one value per sample and channel.
    ChannelSum,
    /// Mean over H and W, one value per sample and channel.
    SpatialMean,
    /// Mean over H, W and C, one value per sample.
    SampleMean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    Reduce(usize, Reduce),
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Filter {
        input: usize,
        filter: Rc<Filter2d>,
        pad: Pad,
    },
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    HaarBand(usize, Band),
    HaarSynthesis([usize; 4]),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Unary(a, _) | Op::Reduce(a, _) | Op::HaarBand(a, _) => vec![*a],
            Op::Filter { input, .. } | Op::Slice { input, .. } => vec![*input],
            Op::Binary(a, b, _) => vec![*a, *b],
            Op::Conv {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias);
                v
            }
            Op::Concat(parts) => parts.clone(),
            Op::HaarSynthesis(b) => b.to_vec(),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-use tape of tensor operations.
///
/// Values are recorded eagerly as operations are called; [`Graph::backward`]
/// walks the tape once in reverse and leaves gradients on the leaves that
/// asked for them. Nodes are appended in call order, so every node's inputs
/// precede it.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_ran: bool,
    evaluations: usize,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_ran: false,
            evaluations: 0,
            check_finite: false,
        }
    }

    /// Makes every operation fail with [`TensorError::NonFinite`] as soon as
    /// it produces a NaN or infinity.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Total recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Recorded nodes that are operations rather than leaves.
    pub fn op_count(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    /// Local-gradient evaluations performed by the last backward pass.
    pub fn backward_evaluations(&self) -> usize {
        self.evaluations
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let y = self.value(x).map(|v| f.apply(v));
        self.push(Op::Unary(x.0, f), y, "unary")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(alpha))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Unary::Clamp(lo, hi))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(s))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn smooth_l1(&mut self, x: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(TensorError::InvalidArgument(format!("smooth-L1 beta must be > 0, got {beta}")));
        }
        self.unary(x, Unary::SmoothL1(beta))
    }

    fn binary(&mut self, a: Var, b: Var, op: Binary, name: &'static str) -> Result<Var> {
        let f = match op {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out = kernels::broadcast_binary(name, self.value(a), self.value(b), f)?;
        self.push(Op::Binary(a.0, b.0, op), out, name)
    }

    /// `a + b`, broadcasting size-1 dimensions of either side.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div, "div")
    }

    fn reduce(&mut self, x: Var, r: Reduce) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.is_empty() {
            return Err(TensorError::Empty { op: "reduce" });
        }
        let out = match r {
            Reduce::Sum => Tensor::scalar(t.sum()),
            Reduce::Mean => Tensor::scalar(t.mean()),
            Reduce::ChannelSum | Reduce::SpatialMean => {
                let mut acc = vec![0.0; s.n * s.c];
                for n in 0..s.n {
                    let per = &t.data()[n * s.h * s.w * s.c..(n + 1) * s.h * s.w * s.c];
                    for px in per.chunks(s.c) {
                        for (a, v) in acc[n * s.c..(n + 1) * s.c].iter_mut().zip(px) {
                            *a += v;
                        }
                    }
                }
                if r == Reduce::SpatialMean {
                    let area = (s.h * s.w) as f64;
                    acc.iter_mut().for_each(|a| *a /= area);
                }
                Tensor::new(Shape::new(s.n, 1, 1, s.c), acc)?
            }
            Reduce::SampleMean => {
                let per = s.h * s.w * s.c;
                let means = t
                    .data()
                    .chunks(per)
                    .map(|c| c.iter().sum::<f64>() / per as f64)
                    .collect();
                Tensor::new(Shape::new(s.n, 1, 1, 1), means)?
            }
        };
        self.push(Op::Reduce(x.0, r), out, "reduce")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Sum)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::Mean)
    }

    /// Per-sample, per-channel sum over the spatial axes: `[N, 1, 1, C]`.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::ChannelSum)
    }

    /// Global average pool: `[N, 1, 1, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::SpatialMean)
    }

    /// Mean of each sample over all of its elements: `[N, 1, 1, 1]`.
    pub fn sample_mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(x, Reduce::SampleMean)
    }

    /// See [`kernels::conv2d`].
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let geom = kernels::conv_geometry(
            self.shape(x),
            self.shape(kernel),
            bias.map(|b| self.shape(b)),
            stride,
            padding,
        )?;
        let out = kernels::conv2d_with(self.value(x), self.value(kernel), bias.map(|b| self.value(b)), &geom);
        self.push(
            Op::Conv {
                input: x.0,
                kernel: kernel.0,
                bias: bias.map(|b| b.0),
                geom,
            },
            out,
            "conv2d",
        )
    }

    /// Fixed depthwise filter, same-size output.
    pub fn filter2d(&mut self, x: Var, filter: Rc<Filter2d>, pad: Pad) -> Result<Var> {
        filter.check(self.shape(x), pad)?;
        let out = kernels::filter2d_unchecked(self.value(x), &filter, pad);
        self.push(Op::Filter { input: x.0, filter, pad }, out, "filter2d")
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat_channels(&values)?;
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), out, "concat")
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = kernels::slice_channels(self.value(x), start, len)?;
        self.push(Op::Slice { input: x.0, start }, out, "slice_channels")
    }

    /// Single-stage Haar analysis, recorded as four band nodes.
    pub fn dwt(&mut self, x: Var) -> Result<SubBands<Var>> {
        wavelet::check_even(self.shape(x))?;
        let mut band = |b: Band| -> Result<Var> {
            let out = wavelet::analysis_band(self.value(x), b);
            self.push(Op::HaarBand(x.0, b), out, "dwt")
        };
        Ok(SubBands {
            ll: band(Band::LL)?,
            lh: band(Band::LH)?,
            hl: band(Band::HL)?,
            hh: band(Band::HH)?,
        })
    }

    /// Haar synthesis, inverse of [`Graph::dwt`].
    pub fn idwt(&mut self, b: &SubBands<Var>) -> Result<Var> {
        let values = SubBands {
            ll: self.value(b.ll).clone(),
            lh: self.value(b.lh).clone(),
            hl: self.value(b.hl).clone(),
            hh: self.value(b.hh).clone(),
        };
        let out = wavelet::idwt(&values)?;
        self.push(Op::HaarSynthesis([b.ll.0, b.lh.0, b.hl.0, b.hh.0]), out, "idwt")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// A graph supports exactly one backward pass; a second call returns
    /// [`TensorError::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        let root = &self.nodes[loss.0];
        if !root.value.shape().is_scalar() {
            return Err(TensorError::NotScalar(root.value.shape()));
        }
        if !root.requires_grad {
            return Err(TensorError::Detached);
        }
        self.backward_ran = true;
        self.evaluations = 0;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.evaluations += 1;
            for (input, gi) in self.local_grads(i, &g) {
                accumulate(&mut grads, input, gi);
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Gradient contributions of node `i` to each of its inputs that needs one.
    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Unary(a, f) => {
                let x = &self.nodes[*a].value;
                let gx = Tensor::new(
                    x.shape(),
                    x.data()
                        .iter()
                        .zip(node.value.data())
                        .zip(g.data())
                        .map(|((&xv, &yv), &gv)| gv * f.derivative(xv, yv))
                        .collect(),
                )
                .expect("unary gradient");
                out.push((*a, gx));
            }
            Op::Binary(a, b, op) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let bin = |x: &Tensor, y: &Tensor, f: fn(f64, f64) -> f64| {
                    kernels::broadcast_binary("backward", x, y, f).expect("shapes validated in forward")
                };
                if self.wants(*a) {
                    let ga = match op {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => bin(g, bv, |p, q| p * q),
                        Binary::Div => bin(g, bv, |p, q| p / q),
                    };
                    out.push((*a, kernels::reduce_to_shape(&ga, av.shape())));
                }
                if self.wants(*b) {
                    let gb = match op {
                        Binary::Add => g.clone(),
                        Binary::Sub => g.map(|v| -v),
                        Binary::Mul => bin(g, av, |p, q| p * q),
                        Binary::Div => {
                            let t = g.zip_map(&node.value, |p, q| p * q).expect("output-shaped");
                            bin(&t, bv, |p, q| -p / q)
                        }
                    };
                    out.push((*b, kernels::reduce_to_shape(&gb, bv.shape())));
                }
            }
            Op::Reduce(a, r) => {
                let s = self.nodes[*a].value.shape();
                let gx = match r {
                    Reduce::Sum => Tensor::full(s, g.data()[0]),
                    Reduce::Mean => Tensor::full(s, g.data()[0] / s.len() as f64),
                    Reduce::ChannelSum => Tensor::from_fn(s, |n, _, _, c| g.get(n, 0, 0, c)),
                    Reduce::SpatialMean => {
                        let area = (s.h * s.w) as f64;
                        Tensor::from_fn(s, |n, _, _, c| g.get(n, 0, 0, c) / area)
                    }
                    Reduce::SampleMean => {
                        let per = (s.h * s.w * s.c) as f64;
                        Tensor::from_fn(s, |n, _, _, _| g.get(n, 0, 0, 0) / per)
                    }
                };
                out.push((*a, gx));
            }
            Op::Conv {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (x, k) = (&self.nodes[*input].value, &self.nodes[*kernel].value);
                if self.wants(*input) {
                    out.push((*input, kernels::conv2d_grad_input(g, k, x.shape(), geom)));
                }
                if self.wants(*kernel) {
                    out.push((*kernel, kernels::conv2d_grad_kernel(g, x, k.shape(), geom)));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        out.push((*b, kernels::conv2d_grad_bias(g)));
                    }
                }
            }
            Op::Filter { input, filter, pad } => {
                out.push((*input, kernels::filter2d_adjoint(g, filter, *pad)));
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.nodes[p].value.shape().c;
                    if self.wants(p) {
                        out.push((p, kernels::slice_channels(g, start, c).expect("concat slice")));
                    }
                    start += c;
                }
            }
            Op::Slice { input, start } => {
                let s = self.nodes[*input].value.shape();
                let len = g.shape().c;
                let mut gx = Tensor::zeros(s);
                for (dst, src) in gx.data_mut().chunks_mut(s.c).zip(g.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                out.push((*input, gx));
            }
            Op::HaarBand(a, band) => {
                out.push((*a, wavelet::analysis_band_adjoint(g, *band)));
            }
            Op::HaarSynthesis(bands) => {
                let gb = wavelet::dwt(g).expect("synthesis output has even size");
                for (&idx, t) in bands.iter().zip([gb.ll, gb.lh, gb.hl, gb.hh]) {
                    if self.wants(idx) {
                        out.push((idx, t));
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
