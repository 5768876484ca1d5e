//! A small reverse-mode layer library over `ndarray`.
//!
//! Layers expose an explicit `forward` that optionally records a cache and
//! a `backward` that consumes it, accumulating parameter gradients into a
//! [`Grads`] table indexed by parameter id. Everything runs in `f64`.

mod act;
mod attention;
mod conv;
mod linear;
mod norm;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

pub use act::{gelu, gelu_backward, relu, relu_backward, softmax_rows, Dropout};
pub use attention::{AttnCache, WindowAttention, WindowLayout};
pub use conv::{global_avg_pool, global_avg_pool_backward, Conv2d, ConvCache, MaxPool, PoolCache};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm, BnCache, LayerNorm, LnCache};

use crate::rng::{self, Rng};

/// Row-major copy of `a`, or `a` itself when already row-major.
pub(crate) fn standard<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// A named tensor owned by a layer.
#[derive(Debug, Clone)]
pub struct Param {
    pub id: usize,
    pub name: String,
    pub value: ArrayD<f64>,
    /// Running statistics are parameters that the optimiser must skip.
    pub trainable: bool,
}

/// Forward-pass settings.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    /// Batch statistics and active dropout.
    pub train: bool,
    /// Keep the activations needed by `backward`.
    pub record: bool,
    pub dropout_seed: u64,
}

impl Ctx {
    pub fn train(seed: u64) -> Self {
        Self { train: true, record: true, dropout_seed: seed }
    }

    pub fn eval() -> Self {
        Self { train: false, record: false, dropout_seed: 0 }
    }

    /// Inference-mode forward that still records activations (Grad-CAM).
    pub fn eval_recording() -> Self {
        Self { train: false, record: true, dropout_seed: 0 }
    }
}

/// Gradient table indexed by parameter id. Slots are allocated lazily.
#[derive(Debug, Clone)]
pub struct Grads {
    slots: Vec<Option<ArrayD<f64>>>,
    /// When false only input gradients are propagated.
    pub params: bool,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Self { slots: vec![None; n_params], params: true }
    }

    /// Gradient table that ignores parameter gradients.
    pub fn inputs_only() -> Self {
        Self { slots: Vec::new(), params: false }
    }

    pub fn add(&mut self, p: &Param, g: ArrayD<f64>) {
        if !self.params {
            return;
        }
        debug_assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
        match &mut self.slots[p.id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    pub fn get(&self, id: usize) -> Option<&ArrayD<f64>> {
        self.slots.get(id).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: usize) -> Option<&mut ArrayD<f64>> {
        self.slots.get_mut(id).and_then(Option::as_mut)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Euclidean norm over every stored gradient.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.slots.iter_mut().flatten() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Anything owning parameters.
pub trait Module {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_| n += 1);
        n
    }

    /// Number of scalar weights (trainable only).
    fn weight_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }

    /// Copy of every parameter value in id order.
    fn snapshot(&self) -> Vec<ArrayD<f64>> {
        let mut v = Vec::new();
        self.visit_params(&mut |p| v.push(p.value.clone()));
        v
    }

    fn restore(&mut self, values: &[ArrayD<f64>]) {
        let mut it = values.iter();
        self.visit_params_mut(&mut |p| {
            p.value.assign(it.next().expect("snapshot has one value per parameter"));
        });
    }
}

/// Parameter factory: hands out dense ids, builds dotted names and owns the
/// initialisation RNG.
pub struct Init {
    rng: Rng,
    next: usize,
    scope: Vec<String>,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng::seeded(seed), next: 0, scope: Vec::new() }
    }

    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Init) -> T) -> T {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    pub fn param(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> Param {
        let mut full = self.scope.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let id = self.next;
        self.next += 1;
        Param { id, name: full, value, trainable }
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn issued(&self) -> usize {
        self.next
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Param {
        self.param(name, ArrayD::zeros(IxDyn(shape)), true)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Param {
        self.param(name, ArrayD::ones(IxDyn(shape)), true)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Param {
        let d = Normal::new(0.0, std).expect("finite std");
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || d.sample(&mut self.rng));
        self.param(name, v, true)
    }

    /// Normal truncated to two standard deviations (resampled).
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Param {
        let d = Normal::new(0.0, std).expect("finite std");
        let v = ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
            let x: f64 = d.sample(&mut self.rng);
            if x.abs() <= 2.0 * std {
                break x;
            }
        });
        self.param(name, v, true)
    }
}

#[cfg(test)]
pub(crate) mod check {
    //! Central finite-difference checks shared by layer tests.

    use ndarray::{ArrayD, IxDyn};
    use rand::Rng as _;

    use crate::rng;

    pub fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut r = rng::seeded(seed);
        ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random::<f64>() * 2.0 - 1.0)
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Compares `analytic` with the central difference of `loss` at up to
    /// `probes` coordinates of `x`.
    pub fn compare(
        x: &ArrayD<f64>,
        analytic: &ArrayD<f64>,
        probes: usize,
        tol: f64,
        mut loss: impl FnMut(&ArrayD<f64>) -> f64,
    ) {
        assert_eq!(x.shape(), analytic.shape());
        let n = x.len();
        let step = (n / probes).max(1);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in (0..n).step_by(step).take(probes) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[i] += h;
            let mut xm = x.clone();
            xm.as_slice_mut().unwrap()[i] -= h;
            let num = (loss(&xp) - loss(&xm)) / (2.0 * h);
            let ana = analytic.as_slice().unwrap()[i];
            let e = rel_err(num, ana);
            if (num - ana).abs() > 1e-7 {
                worst = worst.max(e);
            }
        }
        assert!(worst < tol, "finite-difference mismatch: rel err {worst}");
    }

    pub fn dot(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }
}
