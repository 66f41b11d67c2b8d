use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::Parameters;
use crate::numerics::{Matrix, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps of linear warmup from 0 to `lr`.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup: 50,
        }
    }
}

/// Adam with bias correction and linear warmup.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: usize,
    m: BTreeMap<String, Matrix<T>>,
    v: BTreeMap<String, Matrix<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used by step `t` (1-based).
    pub fn rate_at(&self, t: usize) -> f64 {
        if self.config.warmup == 0 {
            self.config.lr
        } else {
            self.config.lr * (t as f64 / self.config.warmup as f64).min(1.0)
        }
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &BTreeMap<String, Matrix<T>>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::lit(self.rate_at(self.step));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let eps = T::lit(c.eps);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / corr1;
                let vhat = *vi / corr2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
