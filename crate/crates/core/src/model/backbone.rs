//! Residual CNN feature extractor.
//!
//! A stride-2 stem followed by stages of basic residual blocks. The first
//! block of every stage halves the resolution, so the network downsamples by
//! `2^(stages + 1)` and emits the last stage's channel count.

use rand::Rng;

use super::{Bindings, ModelConfig};
use crate::error::Result;
use crate::numerics::{ConvGeometry, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn conv_weight<T: Scalar, R: Rng + ?Sized>(
    out: usize,
    inp: usize,
    k: usize,
    rng: &mut R,
) -> Tensor<T> {
    let fan_in = (inp * k * k) as f64;
    Tensor::randn(&[out, inp, k, k], (2.0 / fan_in).sqrt(), rng)
}

pub(crate) fn init_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[c]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
}

/// Layer normalization over the channel axis at every spatial position.
pub(crate) fn channel_norm<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    prefix: &str,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, 1, T::from_f64_lossy(eps))
}

fn block_needs_projection(in_c: usize, out_c: usize, stride: usize) -> bool {
    in_c != out_c || stride != 1
}

pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let c0 = cfg.backbone_stage_channels[0];
    store.insert(
        "backbone.stem.conv.weight".into(),
        conv_weight(c0, cfg.input_channels, 3, rng),
    );
    init_norm(store, "backbone.stem.norm", c0);
    let mut in_c = c0;
    for (s, (&out_c, &blocks)) in cfg
        .backbone_stage_channels
        .iter()
        .zip(&cfg.backbone_blocks_per_stage)
        .enumerate()
    {
        for b in 0..blocks {
            let stride = if b == 0 { 2 } else { 1 };
            let prefix = format!("backbone.stage{s}.block{b}");
            store.insert(format!("{prefix}.conv1.weight"), conv_weight(out_c, in_c, 3, rng));
            init_norm(store, &format!("{prefix}.norm1"), out_c);
            store.insert(format!("{prefix}.conv2.weight"), conv_weight(out_c, out_c, 3, rng));
            init_norm(store, &format!("{prefix}.norm2"), out_c);
            if block_needs_projection(in_c, out_c, stride) {
                store.insert(
                    format!("{prefix}.shortcut.conv.weight"),
                    conv_weight(out_c, in_c, 1, rng),
                );
                init_norm(store, &format!("{prefix}.shortcut.norm"), out_c);
            }
            in_c = out_c;
        }
    }
}

fn residual_block<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    prefix: &str,
    x: Var,
    stride: usize,
    eps: f64,
) -> Result<Var> {
    let in_c = tape.shape(x)[1];
    let w1 = p.get(&format!("{prefix}.conv1.weight"))?;
    let y = tape.conv2d(x, w1, ConvGeometry::new(stride, 1, 1))?;
    let y = channel_norm(tape, p, &format!("{prefix}.norm1"), y, eps)?;
    let y = tape.relu(y);
    let w2 = p.get(&format!("{prefix}.conv2.weight"))?;
    let y = tape.conv2d(y, w2, ConvGeometry::new(1, 1, 1))?;
    let y = channel_norm(tape, p, &format!("{prefix}.norm2"), y, eps)?;
    let out_c = tape.shape(y)[1];
    let shortcut = if block_needs_projection(in_c, out_c, stride) {
        let ws = p.get(&format!("{prefix}.shortcut.conv.weight"))?;
        let s = tape.conv2d(x, ws, ConvGeometry::new(stride, 0, 1))?;
        channel_norm(tape, p, &format!("{prefix}.shortcut.norm"), s, eps)?
    } else {
        x
    };
    let sum = tape.add(y, shortcut)?;
    Ok(tape.relu(sum))
}

/// `x[N×3×H×W]` → feature maps `[N×C×H/f×W/f]`.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let eps = cfg.norm_eps;
    let w = p.get("backbone.stem.conv.weight")?;
    let y = tape.conv2d(x, w, ConvGeometry::new(2, 1, 1))?;
    let y = channel_norm(tape, p, "backbone.stem.norm", y, eps)?;
    let mut y = tape.relu(y);
    for (s, &blocks) in cfg.backbone_blocks_per_stage.iter().enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 { 2 } else { 1 };
            y = residual_block(tape, p, &format!("backbone.stage{s}.block{b}"), y, stride, eps)?;
        }
    }
    Ok(y)
}
