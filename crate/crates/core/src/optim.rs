//! AdamW with linear warmup and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::nn::{zeros_like, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_steps: 1000,
        }
    }
}

impl AdamWConfig {
    /// Learning rate for the (zero-based) update `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// First and second moments for one parameter set, plus the decay mask.
#[derive(Clone, Debug)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
    decay: Vec<bool>,
}

/// Weight decay applies to linear-layer weight matrices only.
fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

impl<P> AdamState<P> {
    pub fn new<T: Scalar>(params: &P) -> Self
    where
        P: ParamSet<T> + Clone,
    {
        let decay = params
            .named_params()
            .iter()
            .map(|(n, _)| decays(n))
            .collect();
        Self {
            m: zeros_like(params),
            v: zeros_like(params),
            step: 0,
            decay,
        }
    }

    pub fn step<T: Scalar>(&mut self, cfg: &AdamWConfig, params: &mut P, grads: &mut P)
    where
        P: ParamSet<T>,
    {
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let b1 = cfg.beta1;
        let b2 = cfg.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (lr_t, b1_t, b2_t, eps_t) = (T::of(lr), T::of(b1), T::of(b2), T::of(cfg.eps));
        let (bc1_t, bc2_t) = (T::of(bc1), T::of(bc2));
        let wd = T::of(lr * cfg.weight_decay);
        let one = T::one();

        let ps = params.params_mut();
        let gs = grads.params_mut();
        let ms = self.m.params_mut();
        let vs = self.v.params_mut();
        for ((((p, g), m), v), &decay) in ps.into_iter().zip(gs).zip(ms).zip(vs).zip(&self.decay) {
            for (((pv, &gv), mv), vv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *mv = b1_t * *mv + (one - b1_t) * gv;
                *vv = b2_t * *vv + (one - b2_t) * gv * gv;
                let mhat = *mv / bc1_t;
                let vhat = *vv / bc2_t;
                if decay {
                    *pv -= wd * *pv;
                }
                *pv -= lr_t * mhat / (vhat.sqrt() + eps_t);
            }
        }
    }
}

/// Global L2 norm over every gradient matrix of every set.
pub fn global_norm<T: Scalar>(sets: &mut [&mut dyn ParamSet<T>]) -> T {
    let mut total = T::zero();
    for s in sets.iter_mut() {
        for g in s.params_mut() {
            total += g.sum_sq();
        }
    }
    total.sqrt()
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm measured before clipping.
pub fn clip_grad_norm<T: Scalar>(sets: &mut [&mut dyn ParamSet<T>], max_norm: f64) -> T {
    let norm = global_norm(sets);
    let max = T::of(max_norm);
    if norm > max {
        let scale = max / norm;
        for s in sets.iter_mut() {
            for g in s.params_mut() {
                g.scale(scale);
            }
        }
    }
    norm
}
