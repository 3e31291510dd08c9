//! Classification head: dropout followed by a single affine layer.

use rand::{Rng, RngCore};

use super::{Bindings, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) fn init<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    rng: &mut R,
) {
    if let Some(k) = cfg.num_classes {
        let d = cfg.descriptor_dim();
        store.insert(
            "head.weight".into(),
            Tensor::randn(&[d, k], (1.0 / d as f64).sqrt(), rng),
        );
        store.insert("head.bias".into(), Tensor::zeros(&[k]));
    }
}

/// Inverted dropout mask: kept units are scaled by `1/(1-p)`.
pub fn dropout_mask<T: Scalar>(shape: &[usize], p: f64, rng: &mut dyn RngCore) -> Tensor<T> {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

/// `d[N×D]` → logits `[N×K]`; softmax is left to the loss.
///
/// Dropout is active only when `dropout_rng` is given.
pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bindings,
    cfg: &ModelConfig,
    d: Var,
    dropout_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if cfg.num_classes.is_none() {
        return Err(Error::config("classifier requested but num_classes is not set"));
    }
    let mut x = d;
    if let Some(rng) = dropout_rng {
        if cfg.dropout_p > 0.0 {
            let mask = dropout_mask(tape.shape(d), cfg.dropout_p, rng);
            let m = tape.constant(mask);
            x = tape.mul(d, m)?;
        }
    }
    let w = p.get("head.weight")?;
    let b = p.get("head.bias")?;
    let logits = tape.matmul(x, w)?;
    tape.add(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_rate_is_close_to_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mask: Tensor<f32> = dropout_mask(&[10_000], 0.5, &mut rng);
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        let rate = zeros as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "dropped fraction {rate}");
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
