use std::collections::BTreeMap;

use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one bias-corrected Adam update to every parameter that has a gradient.
    pub fn step<T: Scalar>(
        &self,
        params: &mut ParamStore<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        state: &mut AdamState<T>,
        lr: f64,
    ) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::data(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            for store in [&state.m, &state.v] {
                if let Some(s) = store.get(name) {
                    if s.shape() != p.shape() {
                        return Err(Error::dim(format!(
                            "optimizer state for {name} has shape {:?}, parameter has {:?}",
                            s.shape(),
                            p.shape()
                        )));
                    }
                }
            }
        }

        state.step += 1;
        let t = state.step as i32;
        let b1 = T::from_f64_lossy(self.beta1);
        let b2 = T::from_f64_lossy(self.beta2);
        let one = T::one();
        let corr1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let corr2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let m = state
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = state
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: &[f64]) -> ParamStore<f64> {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::from_f64(&[w.len()], w).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = store(&[1.0, -2.0]);
        let before = params.clone();
        let grads = store(&[0.0, 0.0]);
        let mut state = AdamState::default();
        Adam::default().step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut params = store(&[1.0]);
        let mut state = AdamState::default();
        let grads = store(&[2.0]); // d(w²)/dw at w = 1
        Adam::default().step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert!(params["w"].item() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = 3 w0² + 0.5 w1², minimum 0 at the origin.
        let mut params = store(&[1.5, -2.0]);
        let mut state = AdamState::default();
        let adam = Adam::default();
        let loss = |w: &[f64]| 3.0 * w[0] * w[0] + 0.5 * w[1] * w[1];
        for _ in 0..200 {
            let w = params["w"].data().to_vec();
            let grads = store(&[6.0 * w[0], w[1]]);
            adam.step(&mut params, &grads, &mut state, 0.1).unwrap();
        }
        assert!(loss(params["w"].data()) < 1e-3, "{:?}", params["w"]);
    }

    #[test]
    fn rejects_non_positive_lr() {
        let mut params = store(&[1.0]);
        let grads = store(&[1.0]);
        let mut state = AdamState::default();
        let err = Adam::default().step(&mut params, &grads, &mut state, 0.0).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn rejects_misaligned_state() {
        let mut params = store(&[1.0, 2.0]);
        let grads = store(&[1.0, 1.0]);
        let mut state = AdamState::default();
        state.m.insert("w".into(), Tensor::zeros(&[3]));
        assert!(Adam::default().step(&mut params, &grads, &mut state, 0.1).is_err());
    }
}
