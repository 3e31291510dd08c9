//! Descriptor aggregation.
//!
//! The projection treats each sample's feature map as `X ∈ R^{C×HW}` and
//! applies two affine maps without a nonlinearity in between:
//! `X_c = W_c X + b_c` (k×HW), then `X_out = W_r X_cᵀ + b_r` (n×k per
//! column), flattened to `k·n` values in channel-major order. The result is
//! l2-normalized by the caller.

use rand::Rng;

use super::{Bindings, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ConvGeometry, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    let c = cfg.feature_channels();
    let (h, w) = cfg.feature_hw();
    let hw = h * w;
    let (k, n) = (cfg.projection_channels, cfg.projection_map_dim);
    store.insert(
        "projection.channel.weight".into(),
        Tensor::randn(&[k, c, 1, 1], (1.0 / c as f64).sqrt(), rng),
    );
    store.insert("projection.channel.bias".into(), Tensor::zeros(&[k]));
    store.insert(
        "projection.spatial.weight".into(),
        Tensor::randn(&[n, hw], (1.0 / hw as f64).sqrt(), rng),
    );
    store.insert("projection.spatial.bias".into(), Tensor::zeros(&[n]));
}

/// `x[N×C×H×W]` → `[N×(k·n)]`, before normalization.
pub fn forward<T: Scalar>(tape: &mut Tape<T>, p: &Bindings, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (batch, hw) = (s[0], s[2] * s[3]);
    let w_r = p.get("projection.spatial.weight")?;
    let expected_hw = tape.shape(w_r)[1];
    if hw != expected_hw {
        return Err(Error::ResolutionMismatch {
            expected: format!("{expected_hw} feature map positions"),
            actual: format!("{hw} ({}×{})", s[2], s[3]),
        });
    }
    let w_c = p.get("projection.channel.weight")?;
    let b_c = p.get("projection.channel.bias")?;
    let xc = tape.conv2d(x, w_c, ConvGeometry::new(1, 0, 1))?;
    let xc = tape.add_channels(xc, b_c)?;
    let k = tape.shape(xc)[1];
    let rows = tape.reshape(xc, &[batch * k, hw])?;
    let w_rt = tape.transpose(w_r)?;
    let out = tape.matmul(rows, w_rt)?;
    let b_r = p.get("projection.spatial.bias")?;
    let out = tape.add(out, b_r)?;
    let n = tape.shape(out)[1];
    tape.reshape(out, &[batch, k * n])
}

/// Global average over spatial positions: `[N×C×H×W]` → `[N×C]`.
pub fn avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let flat = tape.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    tape.mean_axis(flat, 2)
}
