//! Adaptive-moment optimizer with step-count learning-rate halving,
//! global-norm gradient clipping and per-parameter freeze flags.

use ndarray::ArrayD;

use crate::num::Scalar;

use super::params::{Grads, ParamStore};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// lr(t) = lr0 * 0.5^floor(t / half_period)
    pub half_period: u64,
    /// Global gradient-norm ceiling; gradients are rescaled above it.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr0: 1e-4,
            beta1: 0.9,
            beta2: 0.5,
            eps: 1e-8,
            half_period: 30_000,
            clip_norm: 10.0,
        }
    }
}

pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    frozen: Vec<bool>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, ps: &ParamStore<T>) -> Self {
        let m = ps
            .values()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        let v = ps
            .values()
            .iter()
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        Adam {
            cfg,
            step: 0,
            m,
            v,
            frozen: vec![false; ps.len()],
        }
    }

    /// Freezes every parameter whose registered name starts with `prefix`.
    pub fn freeze_prefix(&mut self, ps: &ParamStore<T>, prefix: &str) {
        for (i, name) in ps.names().iter().enumerate() {
            if name.starts_with(prefix) {
                self.frozen[i] = true;
            }
        }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr0 * 0.5f64.powi((self.step / self.cfg.half_period) as i32)
    }

    pub fn apply(&mut self, ps: &mut ParamStore<T>, mut grads: Grads<T>) {
        let norm = grads.global_norm();
        if norm > self.cfg.clip_norm {
            grads.scale(T::f(self.cfg.clip_norm / norm));
        }
        let lr = self.lr();
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::f(b1), T::f(b2));
        let (c1, c2) = (T::f(1.0 - b1), T::f(1.0 - b2));
        let eps = T::f(self.cfg.eps);
        let scale = T::f(lr / bias1);
        let inv_sqrt_bias2 = T::f(1.0 / bias2.sqrt());

        for (id, g) in grads.iter() {
            if self.frozen[id.0] {
                continue;
            }
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(m)
                .and(v)
                .and(g)
                .and(ps.get_mut(id))
                .for_each(|m, v, &g, p| {
                    *m = b1t * *m + c1 * g;
                    *v = b2t * *v + c2 * g * g;
                    let denom = v.sqrt() * inv_sqrt_bias2 + eps;
                    *p = *p - scale * *m / denom;
                });
        }
    }

    pub fn state(&self) -> (&[ArrayD<T>], &[ArrayD<T>]) {
        (&self.m, &self.v)
    }

    pub fn load_state(&mut self, m: Vec<ArrayD<T>>, v: Vec<ArrayD<T>>, step: u64) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
