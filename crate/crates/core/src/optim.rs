//! Optimizers with prefix-masked updates.
//!
//! Every step takes `active[i]`, the number of leading elements of tensor `i`
//! that belong to the sub-network being trained (see [`Vit::active_lens`]).
//! Elements past that prefix, and their optimizer state, are left untouched.

use crate::real::Real;
use crate::vit::Vit;

/// Half-cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
}

fn state_like<T: Real>(model: &Vit<T>) -> Vec<Vec<T>> {
    model.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect()
}

/// SGD with heavy-ball momentum and optional L2 weight decay.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Vit<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: state_like(model),
        }
    }

    pub fn step(&mut self, model: &mut Vit<T>, grads: &Vit<T>, lr: f64, active: &[usize]) {
        let mu = T::from_f64_lossy(self.momentum);
        let wd = T::from_f64_lossy(self.weight_decay);
        let lr = T::from_f64_lossy(lr);
        for (((w, g), v), &n) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.velocity)
            .zip(active)
        {
            for ((w, &g), v) in w[..n].iter_mut().zip(&g[..n]).zip(&mut v[..n]) {
                *v = mu * *v + g + wd * *w;
                *w = *w - lr * *v;
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(model: &Vit<T>, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: state_like(model),
            v: state_like(model),
        }
    }

    pub fn step(&mut self, model: &mut Vit<T>, grads: &Vit<T>, lr: f64, active: &[usize]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / c1);
        let decay = T::from_f64_lossy(1.0 - lr * self.weight_decay);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for ((((w, g), m), v), &n) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
            .zip(active)
        {
            for (((w, &g), m), v) in w[..n].iter_mut().zip(&g[..n]).zip(&mut m[..n]).zip(&mut v[..n]) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w * decay - step_size * *m / ((*v * inv_c2).sqrt() + eps);
            }
        }
    }
}
