//! Learning-rate schedule, decoupled-weight-decay Adam, gradient clipping
//! and early stopping.

use std::f64::consts::PI;

use ndarray::ArrayD;

use crate::nn::{Grads, Module};

/// Linear warm-up to `lr_max` over the first `warmup_frac` of the steps,
/// then cosine decay to `lr_min` at `total`.
pub fn lr_at(step: usize, total: usize, lr_max: f64, lr_min: f64, warmup_frac: f64) -> f64 {
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = warmup_frac * total;
    if step < warm {
        return lr_max * step / warm;
    }
    if total <= warm {
        return lr_max;
    }
    let progress = (step - warm) / (total - warm);
    // cos(pi / 2) is not exactly zero in floating point.
    if progress == 0.5 {
        return 0.5 * (lr_max + lr_min);
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / (norm + 1e-6));
    }
    norm
}

/// Adam with decoupled weight decay, applied to every trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: vec![None; n_params], v: vec![None; n_params] }
    }

    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M, grads: &Grads, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.get(p.id) else { return };
            let m = ms[p.id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = vs[p.id].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(&mut p.value).and(&mut *m).and(&mut *v).and(g).for_each(|w, m, v, &g| {
                *w -= lr * wd * *w;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        });
    }
}

/// Tracks the best validation loss; improvement means lower by at least
/// `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, min_delta: 1e-6, best: f64::INFINITY, best_epoch: 0, stale: 0 }
    }

    /// Records the loss of 1-based `epoch`.
    pub fn update(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = loss <= self.best - self.min_delta || (self.best.is_infinite() && loss.is_finite());
        if improved {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision { improved, stop: self.stale >= self.patience }
    }

    pub fn best(&self) -> (f64, usize) {
        (self.best, self.best_epoch)
    }
}
