//! The MSC block and the U-shaped wavelet network built from it.
//!
//! Contracting levels run an MSC block, split the result into Haar
//! sub-bands, normalize and gate them, then project the `4C` stacked bands
//! to `2C` channels. Expanding levels invert that: a 1x1 conv produces four
//! bands, which are denormalized, synthesized back to full resolution and
//! concatenated with the matching contracting output before the next MSC
//! block.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Graph, Padding, Shape, Tensor, TensorError, Var};
use crate::wavelet::{self, Band, SubBands};

/// Negative slope of every hidden activation.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Value range assumed when normalizing sub-bands.
pub const SUBBAND_VMAX: f64 = 1.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetworkError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by {multiple} (2^levels); pad the image to a multiple of {multiple} first")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },
    #[error("input must have 3 channels, got {0}")]
    Channels(usize),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found}, expected {expected}")]
    ParamShape {
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetworkConfig {
    /// Number of analysis stages on the contracting path.
    pub levels: usize,
    /// Channel width at full resolution; doubles per level.
    pub base_channels: usize,
    /// Stacked convolutions per MSC block.
    pub msc_depth: usize,
    /// Add the network input to the final conv output before clamping.
    pub global_residual: bool,
    /// Squeeze ratio of the sub-band attention.
    pub attention_reduction: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            levels: 3,
            base_channels: 16,
            msc_depth: 3,
            global_residual: true,
            attention_reduction: 4,
        }
    }
}

impl NetworkConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_channels == 0 || self.msc_depth == 0 {
            return Err(NetworkError::Config(format!(
                "levels, base_channels and msc_depth must all be >= 1 (got {}, {}, {})",
                self.levels, self.base_channels, self.msc_depth
            )));
        }
        for l in 0..self.levels {
            wavelet::attention_hidden(self.channels(l), self.attention_reduction)
                .map_err(|e| NetworkError::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn check_input(&self, s: Shape) -> Result<()> {
        if s.c != 3 {
            return Err(NetworkError::Channels(s.c));
        }
        let m = self.size_multiple();
        if s.h % m != 0 || s.w % m != 0 || s.h == 0 || s.w == 0 {
            return Err(NetworkError::Indivisible {
                height: s.h,
                width: s.w,
                multiple: m,
            });
        }
        Ok(())
    }

    /// Every learnable tensor with its shape, in initialization order.
    pub fn param_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        for l in 0..self.levels {
            let c = self.channels(l);
            let cin = if l == 0 { 3 } else { c };
            self.push_msc(&mut out, &format!("enc{l}"), cin, c);
            let hidden = c / self.attention_reduction.max(1);
            for band in Band::ALL {
                let b = band.name();
                out.push((format!("enc{l}.attn.{b}.squeeze"), Shape::new(1, 1, c, hidden)));
                out.push((format!("enc{l}.attn.{b}.excite"), Shape::new(1, 1, hidden, c)));
            }
            push_conv(&mut out, &format!("enc{l}.down"), 1, 4 * c, 2 * c);
        }
        let cl = self.channels(self.levels);
        self.push_msc(&mut out, "mid", cl, cl);
        for l in (0..self.levels).rev() {
            let c = self.channels(l);
            push_conv(&mut out, &format!("dec{l}.up"), 1, 2 * c, 4 * c);
            self.push_msc(&mut out, &format!("dec{l}"), 2 * c, c);
        }
        push_conv(&mut out, "out", 3, self.channels(0), 3);
        out
    }

    fn push_msc(&self, out: &mut Vec<(String, Shape)>, prefix: &str, cin: usize, cout: usize) {
        push_conv(out, &format!("{prefix}.map"), 3, cin, cin);
        push_conv(out, &format!("{prefix}.proj"), 1, cin, cout);
        for i in 0..self.msc_depth {
            push_conv(out, &format!("{prefix}.layer{i}"), 3, cout, cout);
        }
    }
}

fn push_conv(out: &mut Vec<(String, Shape)>, name: &str, k: usize, cin: usize, cout: usize) {
    out.push((format!("{name}.w"), Shape::new(k, k, cin, cout)));
    out.push((format!("{name}.b"), Shape::new(1, 1, 1, cout)));
}

/// Named learnable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        ModelParams::default()
    }

    /// Kernels and attention weights uniform in `±sqrt(6 / fan_in)`, biases
    /// and the output kernel zero, drawn from a ChaCha stream seeded with `seed`.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        for (name, shape) in cfg.param_shapes() {
            // The output conv starts at zero so the network begins as the
            // identity and no pixel starts outside the clamp.
            let t = if name.ends_with(".b") || name == "out.w" {
                Tensor::zeros(shape)
            } else {
                let fan_in = (shape.n * shape.h * shape.w) as f64;
                let bound = (6.0 / fan_in).sqrt();
                let data = (0..shape.len()).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            };
            p.insert(name, t);
        }
        Ok(p)
    }

    /// Every tensor, biases included, uniform in `±bound`.
    pub fn uniform(cfg: &NetworkConfig, seed: u64, bound: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        for (name, shape) in cfg.param_shapes() {
            p.insert(name, Tensor::random_uniform(shape, -bound, bound, &mut rng));
        }
        Ok(p)
    }

    /// All-zero parameters of the right shapes.
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            tensors: cfg
                .param_shapes()
                .into_iter()
                .map(|(n, s)| (n, Tensor::zeros(s)))
                .collect(),
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn count_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<()> {
        for (name, expected) in cfg.param_shapes() {
            let t = self.get(&name).ok_or_else(|| NetworkError::MissingParam(name.clone()))?;
            if t.shape() != expected {
                return Err(NetworkError::ParamShape {
                    name,
                    expected,
                    found: t.shape(),
                });
            }
        }
        Ok(())
    }

    /// Records every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), g.leaf(t.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters recorded on a graph.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl From<BTreeMap<String, Var>> for BoundParams {
    fn from(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NetworkError::MissingParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    fn conv(&self, name: &str) -> Result<Conv<Var>> {
        Ok(Conv {
            weight: self.var(&format!("{name}.w"))?,
            bias: self.var(&format!("{name}.b"))?,
        })
    }

    /// The MSC block stored under `prefix`.
    pub fn msc_block(&self, prefix: &str, depth: usize) -> Result<MscBlock<Var>> {
        Ok(MscBlock {
            attn_map: self.conv(&format!("{prefix}.map"))?,
            proj: self.conv(&format!("{prefix}.proj"))?,
            layers: (0..depth)
                .map(|i| self.conv(&format!("{prefix}.layer{i}")))
                .collect::<Result<_>>()?,
            slope: LEAKY_SLOPE,
        })
    }

    fn attention(&self, prefix: &str) -> Result<SubBands<(Var, Var)>> {
        let pair = |b: Band| -> Result<(Var, Var)> {
            Ok((
                self.var(&format!("{prefix}.attn.{}.squeeze", b.name()))?,
                self.var(&format!("{prefix}.attn.{}.excite", b.name()))?,
            ))
        };
        Ok(SubBands {
            ll: pair(Band::LL)?,
            lh: pair(Band::LH)?,
            hl: pair(Band::HL)?,
            hh: pair(Band::HH)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: T,
    pub bias: T,
}

/// Contrast-aware attention gate followed by stacked convolutions that each
/// re-inject the projected gated input.
#[derive(Clone, Debug, PartialEq)]
pub struct MscBlock<T> {
    /// 3x3, C -> C; sigmoid gives the per-pixel attention map.
    pub attn_map: Conv<T>,
    /// 1x1, C -> C_out.
    pub proj: Conv<T>,
    /// 3x3, C_out -> C_out each.
    pub layers: Vec<Conv<T>>,
    pub slope: f64,
}

fn conv(g: &mut Graph, x: Var, c: &Conv<Var>) -> Result<Var> {
    let k = g.shape(c.weight).n;
    let padding = if k == 1 { Padding::Valid } else { Padding::Same };
    Ok(g.conv2d(x, c.weight, Some(c.bias), 1, padding)?)
}

/// `C_a = sigmoid(F_map(x))`, `P = F_0(C_a * x)`, `X_1 = P`,
/// `X_{l+1} = act(F_l(X_l + P))`; returns the last `X`.
pub fn msc_forward(g: &mut Graph, x: Var, blk: &MscBlock<Var>) -> Result<Var> {
    if blk.layers.is_empty() {
        return Err(NetworkError::Config("MSC block needs at least one layer".into()));
    }
    let cin = g.shape(x).c;
    let expected = g.shape(blk.attn_map.weight).w;
    if cin != expected {
        return Err(NetworkError::Tensor(TensorError::Dimension {
            op: "msc_forward",
            detail: format!("block expects {expected} input channels, got {cin}"),
        }));
    }
    let pre = conv(g, x, &blk.attn_map)?;
    let attention = g.sigmoid(pre)?;
    let gated = g.mul(attention, x)?;
    let projected = conv(g, gated, &blk.proj)?;
    let mut cur = projected;
    for layer in &blk.layers {
        let merged = g.add(cur, projected)?;
        let y = conv(g, merged, layer)?;
        cur = g.leaky_relu(y, blk.slope)?;
    }
    Ok(cur)
}

/// Full network on a graph. `x` is `[N, H, W, 3]` in `[0, 1]`.
pub fn forward(g: &mut Graph, x: Var, params: &BoundParams, cfg: &NetworkConfig) -> Result<Var> {
    forward_ablated(g, x, params, cfg, &[])
}

/// [`forward`] with the skip connections of the listed levels replaced by
/// zeros. Used to probe how much the skips contribute.
pub fn forward_ablated(
    g: &mut Graph,
    x: Var,
    params: &BoundParams,
    cfg: &NetworkConfig,
    dropped_skips: &[usize],
) -> Result<Var> {
    cfg.validate()?;
    cfg.check_input(g.shape(x))?;

    let mut h = x;
    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        let p = format!("enc{l}");
        h = msc_forward(g, h, &params.msc_block(&p, cfg.msc_depth)?)?;
        skips.push(h);
        let bands = g.dwt(h)?;
        let bands = wavelet::normalize_vars(g, &bands, SUBBAND_VMAX)?;
        let gated = wavelet::attend_vars(g, &bands, &params.attention(&p)?)?;
        let down = conv(g, gated, &params.conv(&format!("{p}.down"))?)?;
        h = g.leaky_relu(down, LEAKY_SLOPE)?;
    }
    h = msc_forward(g, h, &params.msc_block("mid", cfg.msc_depth)?)?;

    for l in (0..cfg.levels).rev() {
        let c = cfg.channels(l);
        let up = conv(g, h, &params.conv(&format!("dec{l}.up"))?)?;
        let up = g.leaky_relu(up, LEAKY_SLOPE)?;
        let bands = SubBands {
            ll: g.slice_channels(up, 0, c)?,
            lh: g.slice_channels(up, c, c)?,
            hl: g.slice_channels(up, 2 * c, c)?,
            hh: g.slice_channels(up, 3 * c, c)?,
        };
        let bands = wavelet::denormalize_vars(g, &bands, SUBBAND_VMAX)?;
        let restored = g.idwt(&bands)?;
        let skip = if dropped_skips.contains(&l) {
            g.constant(Tensor::zeros(g.shape(skips[l])))
        } else {
            skips[l]
        };
        let fused = g.concat_channels(&[restored, skip])?;
        h = msc_forward(g, fused, &params.msc_block(&format!("dec{l}"), cfg.msc_depth)?)?;
    }

    let residual = conv(g, h, &params.conv("out")?)?;
    let y = if cfg.global_residual {
        g.add(x, residual)?
    } else {
        residual
    };
    Ok(g.clamp(y, 0.0, 1.0)?)
}

/// Inference without gradient tracking.
pub fn enhance(x: &Tensor, params: &ModelParams, cfg: &NetworkConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let bound = params.bind(&mut g, false);
    let y = forward(&mut g, xv, &bound, cfg)?;
    Ok(g.value(y).clone())
}

/// Total scalar count of `params`.
pub fn count_params(params: &ModelParams) -> usize {
    params.count_params()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            levels: 1,
            base_channels: 4,
            msc_depth: 2,
            ..NetworkConfig::default()
        }
    }

    fn block_params(cin: usize, cout: usize, depth: usize) -> ModelParams {
        let mut p = ModelParams::new();
        let mut conv = |name: &str, k: usize, ci: usize, co: usize| {
            p.insert(format!("b.{name}.w"), Tensor::zeros(Shape::new(k, k, ci, co)));
            p.insert(format!("b.{name}.b"), Tensor::zeros(Shape::new(1, 1, 1, co)));
        };
        conv("map", 3, cin, cin);
        conv("proj", 1, cin, cout);
        for i in 0..depth {
            conv(&format!("layer{i}"), 3, cout, cout);
        }
        p
    }

    #[test]
    fn msc_zero_input_gives_zero_output() {
        let p = block_params(3, 5, 2);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let blk = bound.msc_block("b", 2).unwrap();
        let x = g.constant(Tensor::zeros(Shape::new(2, 4, 6, 3)));
        let y = msc_forward(&mut g, x, &blk).unwrap();
        assert_eq!(g.value(y).shape(), Shape::new(2, 4, 6, 5));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msc_saturated_gate_blocks_input() {
        // With the gate bias at -1000 the attention map is exp(-1000) ~ 0, so
        // the block sees a zero input and only its biases act:
        // P = b_proj, X_2 = act(w * 2P + b_1) with a 1-channel identity stack.
        let mut p = block_params(1, 1, 1);
        p.insert("b.map.b", Tensor::scalar(-1000.0));
        p.insert("b.proj.w", Tensor::scalar(1.0));
        p.insert("b.proj.b", Tensor::scalar(0.3));
        let mut centre = Tensor::zeros(Shape::new(3, 3, 1, 1));
        centre.set(1, 1, 0, 0, 2.0);
        p.insert("b.layer0.w", centre);
        p.insert("b.layer0.b", Tensor::scalar(-2.0));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let blk = bound.msc_block("b", 1).unwrap();
        let x = g.constant(Tensor::full(Shape::new(1, 3, 3, 1), 5.0));
        let y = msc_forward(&mut g, x, &blk).unwrap();
        // act(2 * (0.3 + 0.3) - 2) = act(-0.8) = -0.16
        let expected = LEAKY_SLOPE * (2.0 * (0.3 + 0.3) - 2.0);
        for &v in g.value(y).data() {
            assert!((v - expected).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn msc_channel_mismatch() {
        let p = block_params(3, 4, 1);
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let blk = bound.msc_block("b", 1).unwrap();
        let x = g.constant(Tensor::zeros(Shape::new(1, 4, 4, 2)));
        assert!(msc_forward(&mut g, x, &blk).is_err());
    }

    #[test]
    fn forward_preserves_shape_and_range() {
        let cfg = NetworkConfig::default();
        let p = ModelParams::uniform(&cfg, 1, 0.3).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 64, 64, 3), |_, y, x, c| ((y * 7 + x * 3 + c) % 17) as f64 / 16.0);
        let y = enhance(&x, &p, &cfg).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.min() >= 0.0 && y.max() <= 1.0);
    }

    #[test]
    fn fresh_network_is_the_identity() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 5).unwrap();
        let x = Tensor::from_fn(Shape::new(1, 8, 8, 3), |_, y, x, c| ((y + 2 * x + c) % 5) as f64 / 4.0);
        assert_eq!(enhance(&x, &p, &cfg).unwrap(), x);
    }

    #[test]
    fn forward_rejects_indivisible_input() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg, 0).unwrap();
        let err = enhance(&Tensor::zeros(Shape::new(1, 6, 5, 3)), &p, &cfg).unwrap_err();
        assert!(matches!(err, NetworkError::Indivisible { multiple: 2, .. }));
        assert!(err.to_string().contains("pad"));
    }

    #[test]
    fn count_params_basics() {
        assert_eq!(count_params(&ModelParams::new()), 0);
        let mut p = ModelParams::new();
        p.insert("c.w", Tensor::zeros(Shape::new(1, 1, 3, 3)));
        p.insert("c.b", Tensor::zeros(Shape::new(1, 1, 1, 3)));
        assert_eq!(count_params(&p), 12);
    }

    #[test]
    fn init_is_seeded_and_checked() {
        let cfg = tiny();
        let a = ModelParams::init(&cfg, 42).unwrap();
        assert_eq!(a, ModelParams::init(&cfg, 42).unwrap());
        assert_ne!(a, ModelParams::init(&cfg, 43).unwrap());
        a.check(&cfg).unwrap();
        let bigger = NetworkConfig { base_channels: 8, ..cfg };
        assert!(matches!(a.check(&bigger).unwrap_err(), NetworkError::ParamShape { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig { levels: 0, ..tiny() }.validate().is_err());
        assert!(NetworkConfig { base_channels: 6, ..tiny() }.validate().is_err());
        assert!(NetworkConfig::default().validate().is_ok());
    }
}
