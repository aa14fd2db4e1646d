//! Adam optimizer over named parameters. Moment buffers are keyed by
//! parameter name and created lazily, so one optimizer instance can drive any
//! subset of a model's weights — whichever names the gradient map contains.

use std::collections::HashMap;

use crate::nn::GradMap;
use crate::numerics::{NumericsError, Result, Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: HashMap<String, Vec<T>>,
    v: HashMap<String, Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0, m: HashMap::new(), v: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Apply one update: advances the shared step counter once, then updates
    /// every parameter the gradient map covers via the model's own walker.
    /// Returns how many tensors were touched.
    pub fn step_with(
        &mut self,
        grads: &GradMap<T>,
        visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<T>)),
    ) -> Result<usize> {
        self.step += 1;
        let mut updated = 0usize;
        let mut failure: Option<NumericsError> = None;
        visit_mut(&mut |name, value| {
            if failure.is_some() {
                return;
            }
            if let Some(grad) = grads.get(name) {
                match self.update_one(name, value, grad) {
                    Ok(()) => updated += 1,
                    Err(e) => failure = Some(e),
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if updated != grads.len() {
            return Err(NumericsError::contract(format!(
                "optimizer update covered {updated} of {} gradient entries",
                grads.len()
            )));
        }
        Ok(updated)
    }

    fn update_one(&mut self, name: &str, value: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if value.shape() != grad.shape() {
            return Err(NumericsError::dim("adam", value.shape(), grad.shape()));
        }
        let n = value.numel();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); n]);
        let b1 = T::of(self.cfg.beta1);
        let b2 = T::of(self.cfg.beta2);
        let one = T::one();
        // Fold both bias corrections into a single step size.
        let corr1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let corr2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let step_size = T::of(self.cfg.lr * corr2.sqrt() / corr1);
        let eps = T::of(self.cfg.eps);

        let data = value.data_mut();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            data[i] -= step_size * m[i] / (v[i].sqrt() + eps);
        }
        Ok(())
    }
}
