use ndarray::{Array2, ArrayView2, Axis, Ix1, Ix2};

use super::{Ctx, Grads, Init, Param};

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    /// Truncated-normal weights (std 0.02) and zero bias.
    pub fn trunc_normal(init: &mut Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        init.scoped(name, |init| Self {
            weight: init.trunc_normal("weight", &[d_out, d_in], 0.02),
            bias: bias.then(|| init.zeros("bias", &[d_out])),
        })
    }

    /// Uniform `+-1/sqrt(in)` weights and bias.
    pub fn uniform(init: &mut Init, name: &str, d_in: usize, d_out: usize) -> Self {
        use rand::Rng as _;
        let bound = 1.0 / (d_in as f64).sqrt();
        init.scoped(name, |init| {
            let w = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[d_out, d_in]), || {
                init.rng().random_range(-bound..bound)
            });
            let b = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[d_out]), || {
                init.rng().random_range(-bound..bound)
            });
            Self {
                weight: init.param("weight", w, true),
                bias: Some(init.param("bias", b, true)),
            }
        })
    }

    pub fn w(&self) -> ArrayView2<'_, f64> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: Array2<f64>, ctx: &Ctx) -> (Array2<f64>, Option<LinearCache>) {
        let mut y = x.dot(&self.w().t());
        if let Some(b) = &self.bias {
            y += &b.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        }
        (y, ctx.record.then_some(LinearCache { x }))
    }

    pub fn backward(&self, cache: &LinearCache, dy: &Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        if grads.params {
            grads.add(&self.weight, dy.t().dot(&cache.x).into_dyn());
            if let Some(b) = &self.bias {
                grads.add(b, dy.sum_axis(Axis(0)).into_dyn());
            }
        }
        dy.dot(&self.w())
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}
