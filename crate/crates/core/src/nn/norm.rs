use ndarray::{Array1, Array2, Array4, Axis, Ix1, Zip};

use super::{Ctx, Grads, Init, Param};

const EPS: f64 = 1e-5;

/// Batch normalisation over the channel axis of `NCHW` tensors; `(N, F)`
/// inputs are treated as `(N, F, 1, 1)`.
///
/// Running statistics follow `r <- (1 - momentum) r + momentum * batch`,
/// with the unbiased batch variance. They change only through
/// [`BatchNorm::absorb`].
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Option<Array4<f64>>,
    inv_std: Array1<f64>,
    train: bool,
    batch: Option<(Array1<f64>, Array1<f64>)>,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize, momentum: f64) -> Self {
        init.scoped(name, |init| {
            let gamma = init.ones("weight", &[channels]);
            let beta = init.zeros("bias", &[channels]);
            let mut running_mean = init.zeros("running_mean", &[channels]);
            running_mean.trainable = false;
            let mut running_var = init.ones("running_var", &[channels]);
            running_var.trainable = false;
            Self { gamma, beta, running_mean, running_var, momentum }
        })
    }

    fn vec(p: &Param) -> ndarray::ArrayView1<'_, f64> {
        p.value.view().into_dimensionality::<Ix1>().expect("1-d")
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> (Array4<f64>, Option<BnCache>) {
        let c = x.dim().1;
        let m = (x.len() / c.max(1)) as f64;
        let (mean, inv_std, batch) = if ctx.train {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for (ch, plane) in x.axis_iter(Axis(1)).enumerate() {
                let mu = plane.sum() / m;
                let v = plane.fold(0.0, |a, &b| a + (b - mu) * (b - mu)) / m;
                mean[ch] = mu;
                var[ch] = v;
            }
            let inv = var.mapv(|v: f64| 1.0 / (v + EPS).sqrt());
            let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
            (mean.clone(), inv, Some((mean, unbiased)))
        } else {
            let inv = Self::vec(&self.running_var).mapv(|v| 1.0 / (v + EPS).sqrt());
            (Self::vec(&self.running_mean).to_owned(), inv, None)
        };
        let mut xhat = x;
        for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, s) = (mean[ch], inv_std[ch]);
            plane.mapv_inplace(|v| (v - mu) * s);
        }
        let gamma = Self::vec(&self.gamma);
        let beta = Self::vec(&self.beta);
        let affine = |xh: &Array4<f64>| {
            let mut y = xh.clone();
            for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
                let (g, b) = (gamma[ch], beta[ch]);
                plane.mapv_inplace(|v| v * g + b);
            }
            y
        };
        let (y, xhat) = if ctx.record {
            (affine(&xhat), Some(xhat))
        } else {
            (affine(&xhat), None)
        };
        let cache = (ctx.record || ctx.train).then_some(BnCache {
            xhat,
            inv_std,
            train: ctx.train,
            batch,
        });
        (y, cache)
    }

    pub fn forward2(&self, x: Array2<f64>, ctx: &Ctx) -> (Array2<f64>, Option<BnCache>) {
        let (n, f) = x.dim();
        let x4 = super::standard(x).into_shape_with_order((n, f, 1, 1)).expect("contiguous");
        let (y, c) = self.forward(x4, ctx);
        (super::standard(y).into_shape_with_order((n, f)).expect("contiguous"), c)
    }

    pub fn backward(&self, cache: &BnCache, dy: Array4<f64>, grads: &mut Grads) -> Array4<f64> {
        let xhat = cache.xhat.as_ref().expect("forward was not recorded");
        let c = dy.dim().1;
        let m = (dy.len() / c.max(1)) as f64;
        let gamma = Self::vec(&self.gamma);
        let mut sum_dy = Array1::zeros(c);
        let mut sum_dy_xhat = Array1::zeros(c);
        for ch in 0..c {
            let d = dy.index_axis(Axis(1), ch);
            let xh = xhat.index_axis(Axis(1), ch);
            sum_dy[ch] = d.sum();
            sum_dy_xhat[ch] = Zip::from(&d).and(&xh).fold(0.0, |a, &g, &h| a + g * h);
        }
        if grads.params {
            grads.add(&self.gamma, sum_dy_xhat.clone().into_dyn());
            grads.add(&self.beta, sum_dy.clone().into_dyn());
        }
        let mut dx = dy;
        for (ch, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
            let k = gamma[ch] * cache.inv_std[ch];
            if cache.train {
                let (sd, sdx) = (sum_dy[ch] / m, sum_dy_xhat[ch] / m);
                let xh = xhat.index_axis(Axis(1), ch);
                Zip::from(&mut plane).and(&xh).for_each(|g, &h| *g = k * (*g - sd - h * sdx));
            } else {
                plane.mapv_inplace(|g| g * k);
            }
        }
        dx
    }

    pub fn backward2(&self, cache: &BnCache, dy: Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let (n, f) = dy.dim();
        let dy4 = super::standard(dy).into_shape_with_order((n, f, 1, 1)).expect("contiguous");
        super::standard(self.backward(cache, dy4, grads)).into_shape_with_order((n, f)).expect("contiguous")
    }

    /// Folds the batch statistics of a training forward into the running
    /// estimates.
    pub fn absorb(&mut self, cache: &BnCache) {
        if let Some((mean, var)) = &cache.batch {
            let m = self.momentum;
            Zip::from(&mut self.running_mean.value).and(mean.view().into_dyn()).for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            Zip::from(&mut self.running_var.value).and(var.view().into_dyn()).for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Layer normalisation over the last axis of a `(rows, C)` matrix.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| Self {
            gamma: init.ones("weight", &[dim]),
            beta: init.zeros("bias", &[dim]),
        })
    }

    pub fn forward(&self, x: &Array2<f64>, ctx: &Ctx) -> (Array2<f64>, Option<LnCache>) {
        let (rows, c) = x.dim();
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(rows);
        for (r, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mu = row.sum() / c as f64;
            let var = row.fold(0.0, |a, &b| a + (b - mu) * (b - mu)) / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mu) * s);
            inv_std[r] = s;
        }
        let g = BatchNorm::vec(&self.gamma);
        let b = BatchNorm::vec(&self.beta);
        let y = &xhat * &g + &b;
        (y, ctx.record.then_some(LnCache { xhat, inv_std }))
    }

    pub fn backward(&self, cache: &LnCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let g = BatchNorm::vec(&self.gamma);
        if grads.params {
            grads.add(&self.gamma, (dy * &cache.xhat).sum_axis(Axis(0)).into_dyn());
            grads.add(&self.beta, dy.sum_axis(Axis(0)).into_dyn());
        }
        let c = dy.dim().1 as f64;
        let mut dx = dy * &g;
        for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(&cache.inv_std) {
            let sd = row.sum() / c;
            let sdx = Zip::from(&row).and(&xh).fold(0.0, |a, &p, &q| a + p * q) / c;
            Zip::from(&mut row).and(&xh).for_each(|d, &h| *d = s * (*d - sd - h * sdx));
        }
        dx
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
