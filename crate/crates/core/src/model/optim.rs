use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::Scalar;

use super::params::{is_trainable, Params};
use super::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with moments allocated only for trainable tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    frozen_prefix: usize,
    moments: Vec<Option<(ArrayD<T>, ArrayD<T>)>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(model: &Model<T>, cfg: AdamConfig) -> Self {
        let moments = model
            .params
            .tensors()
            .into_iter()
            .map(|(name, t)| {
                model
                    .is_trainable(&name)
                    .then(|| (ArrayD::zeros(t.raw_dim()), ArrayD::zeros(t.raw_dim())))
            })
            .collect();
        Adam {
            cfg,
            step: 0,
            frozen_prefix: model.frozen_prefix(),
            moments,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Names of tensors that carry optimizer state.
    pub fn tracked(&self, model: &Model<T>) -> Vec<String> {
        model
            .params
            .tensors()
            .into_iter()
            .zip(&self.moments)
            .filter(|(_, m)| m.is_some())
            .map(|((n, _), _)| n)
            .collect()
    }

    /// One update of every trainable tensor. Frozen tensors are not read or written.
    pub fn step(&mut self, model: &mut Model<T>, grads: &Params<T>) {
        debug_assert_eq!(self.frozen_prefix, model.frozen_prefix());
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let lr_t = T::from_f64_lossy(self.cfg.lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t)));
        let (tb1, tb2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
        let eps = T::from_f64_lossy(self.cfg.eps);
        let grads = grads.tensors();
        for (((name, mut p), (_, g)), slot) in model
            .params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(self.moments.iter_mut())
        {
            let Some((m, v)) = slot.as_mut() else { continue };
            debug_assert!(is_trainable(&name, self.frozen_prefix));
            ndarray::Zip::from(&mut p).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                *m = tb1 * *m + ob1 * g;
                *v = tb2 * *v + ob2 * g * g;
                *p -= lr_t * *m / (v.sqrt() + eps);
            });
        }
    }
}
