use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nn::{Tensor, WeightStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0 && beta_ok(self.beta1) && beta_ok(self.beta2) && self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments for each trainable parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
    t: u64,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments for the named parameters of `weights`.
    pub fn new<'a>(
        weights: &WeightStore<T>,
        trainable: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for name in trainable {
            let w = weights.require(name)?;
            moments.insert(
                name.to_string(),
                (Tensor::zeros(w.shape().to_vec()), Tensor::zeros(w.shape().to_vec())),
            );
        }
        Ok(Self { moments, t: 0 })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(name).map(|(m, v)| (m, v))
    }

    /// One bias-corrected Adam update of every tracked parameter. Nothing is
    /// modified if any tracked parameter lacks a gradient.
    pub fn step(
        &mut self,
        weights: &mut WeightStore<T>,
        grads: &WeightStore<T>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        cfg.validate()?;
        for name in self.moments.keys() {
            let g = grads.get(name).ok_or_else(|| {
                Error::Consistency(format!("no gradient for trainable parameter {name:?}"))
            })?;
            let w = weights.require(name)?;
            if g.shape() != w.shape() {
                return Err(dim_err!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    w.shape()
                ));
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
        for (name, (m, v)) in self.moments.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let w = weights.get_mut(name).expect("checked above");
            for (((w, &g), m), v) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
