//! Feature mixer: MetaFormer-style blocks with a separable-convolution token mixer.
//!
//! ```text
//! y   = x + scale1 ⊙ SepConv(norm1(x))
//! out = y + scale2 ⊙ MLP(norm2(y))
//! SepConv = reduce_fc ∘ depthwise_conv ∘ StarReLU ∘ expand_fc
//! MLP     = fc2 ∘ StarReLU ∘ fc1
//! ```
//!
//! Channel-wise fully connected layers are 1×1 convolutions. The MLP branch
//! is dropped when `mixer_channel_mlp` is off.

use rand::Rng;

use super::backbone::{channel_norm, init_norm};
use super::{Bindings, ModelConfig};
use crate::error::Result;
use crate::numerics::{ConvGeometry, ParamStore, Scalar, Tape, Tensor, Var};

/// Default StarReLU scale.
pub const STAR_RELU_SCALE: f64 = 0.8944;
/// Default StarReLU bias.
pub const STAR_RELU_BIAS: f64 = -0.4472;

/// The two learnable scalars of `a · ReLU(x)² + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarReluParams {
    pub a: f64,
    pub b: f64,
}

impl Default for StarReluParams {
    fn default() -> Self {
        StarReluParams {
            a: STAR_RELU_SCALE,
            b: STAR_RELU_BIAS,
        }
    }
}

impl StarReluParams {
    pub fn apply(&self, x: f64) -> f64 {
        let r = x.max(0.0);
        self.a * r * r + self.b
    }
}

/// `a · ReLU(x)² + b` with `a`, `b` one-element tensors on the tape.
pub fn star_relu<T: Scalar>(tape: &mut Tape<T>, x: Var, a: Var, b: Var) -> Result<Var> {
    let r = tape.relu(x);
    let sq = tape.square(r);
    let scaled = tape.mul(sq, a)?;
    tape.add(scaled, b)
}

fn fc_weight<T: Scalar, R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor<T> {
    Tensor::randn(&[out, inp, 1, 1], (1.0 / inp as f64).sqrt(), rng)
}

fn init_star_relu<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
    let d = StarReluParams::default();
    store.insert(format!("{prefix}.a"), Tensor::scalar(T::from_f64_lossy(d.a)));
    store.insert(format!("{prefix}.b"), Tensor::scalar(T::from_f64_lossy(d.b)));
}

pub(crate) fn block_prefix(i: usize) -> String {
    format!("mixer.block{i}")
}

pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let c = cfg.feature_channels();
    let hidden = c * cfg.mixer_expansion_ratio;
    let k = cfg.mixer_kernel_size;
    for i in 0..cfg.mixer_depth {
        let p = block_prefix(i);
        init_norm(store, &format!("{p}.norm1"), c);
        store.insert(format!("{p}.token.expand.weight"), fc_weight(hidden, c, rng));
        init_star_relu(store, &format!("{p}.token.act"));
        store.insert(
            format!("{p}.token.dwconv.weight"),
            Tensor::randn(&[hidden, 1, k, k], (1.0 / (k * k) as f64).sqrt(), rng),
        );
        store.insert(format!("{p}.token.reduce.weight"), fc_weight(c, hidden, rng));
        store.insert(format!("{p}.scale1"), Tensor::ones(&[c]));
        if cfg.mixer_channel_mlp {
            init_norm(store, &format!("{p}.norm2"), c);
            store.insert(format!("{p}.mlp.fc1.weight"), fc_weight(hidden, c, rng));
            init_star_relu(store, &format!("{p}.mlp.act"));
            store.insert(format!("{p}.mlp.fc2.weight"), fc_weight(c, hidden, rng));
            store.insert(format!("{p}.scale2"), Tensor::ones(&[c]));
        }
    }
}

fn pointwise<T: Scalar>(tape: &mut Tape<T>, p: &Bindings, name: &str, x: Var) -> Result<Var> {
    let w = p.get(name)?;
    tape.conv2d(x, w, ConvGeometry::new(1, 0, 1))
}

fn separable_conv<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    prefix: &str,
    x: Var,
    kernel: usize,
) -> Result<Var> {
    let y = pointwise(tape, p, &format!("{prefix}.expand.weight"), x)?;
    let (a, b) = (p.get(&format!("{prefix}.act.a"))?, p.get(&format!("{prefix}.act.b"))?);
    let y = star_relu(tape, y, a, b)?;
    let hidden = tape.shape(y)[1];
    let dw = p.get(&format!("{prefix}.dwconv.weight"))?;
    let y = tape.conv2d(y, dw, ConvGeometry::new(1, kernel / 2, hidden))?;
    pointwise(tape, p, &format!("{prefix}.reduce.weight"), y)
}

fn channel_mlp<T: Scalar>(tape: &mut Tape<T>, p: &Bindings, prefix: &str, x: Var) -> Result<Var> {
    let y = pointwise(tape, p, &format!("{prefix}.fc1.weight"), x)?;
    let (a, b) = (p.get(&format!("{prefix}.act.a"))?, p.get(&format!("{prefix}.act.b"))?);
    let y = star_relu(tape, y, a, b)?;
    pointwise(tape, p, &format!("{prefix}.fc2.weight"), y)
}

/// One mixer block; input and output shapes are identical.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    cfg: &ModelConfig,
    index: usize,
    x: Var,
) -> Result<Var> {
    let pre = block_prefix(index);
    let eps = cfg.norm_eps;
    let n1 = channel_norm(tape, p, &format!("{pre}.norm1"), x, eps)?;
    let mixed = separable_conv(tape, p, &format!("{pre}.token"), n1, cfg.mixer_kernel_size)?;
    let s1 = p.get(&format!("{pre}.scale1"))?;
    let mixed = tape.mul_channels(mixed, s1)?;
    let y = tape.add(x, mixed)?;
    if !cfg.mixer_channel_mlp {
        return Ok(y);
    }
    let n2 = channel_norm(tape, p, &format!("{pre}.norm2"), y, eps)?;
    let m = channel_mlp(tape, p, &format!("{pre}.mlp"), n2)?;
    let s2 = p.get(&format!("{pre}.scale2"))?;
    let m = tape.mul_channels(m, s2)?;
    tape.add(y, m)
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let mut y = x;
    for i in 0..cfg.mixer_depth {
        y = block_forward(tape, p, cfg, i, y)?;
    }
    Ok(y)
}
