use ndarray::{Array, Array2, ArrayView, Dimension, Zip};
use rand::Rng as _;
use statrs::function::erf::erf;

use crate::rng;

pub fn relu<D: Dimension>(x: Array<f64, D>) -> Array<f64, D> {
    x.mapv_into(|v| v.max(0.0))
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<D: Dimension>(y: ArrayView<'_, f64, D>, mut dy: Array<f64, D>) -> Array<f64, D> {
    Zip::from(&mut dy).and(&y).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    dy
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu<D: Dimension>(x: ArrayView<'_, f64, D>) -> Array<f64, D> {
    x.mapv(|v| 0.5 * v * (1.0 + erf(v * FRAC_1_SQRT_2)))
}

pub fn gelu_backward<D: Dimension>(x: ArrayView<'_, f64, D>, mut dy: Array<f64, D>) -> Array<f64, D> {
    Zip::from(&mut dy).and(&x).for_each(|g, &v| {
        let cdf = 0.5 * (1.0 + erf(v * FRAC_1_SQRT_2));
        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
        *g *= cdf + v * pdf;
    });
    dy
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

/// Inverted dropout: kept activations are scaled by `1 / (1 - p)`.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    /// Returns the output and the scaled mask (`None` when inactive).
    pub fn forward(&self, x: Array2<f64>, train: bool, seed: u64) -> (Array2<f64>, Option<Array2<f64>>) {
        if !train || self.p <= 0.0 {
            return (x, None);
        }
        let mut r = rng::seeded(seed);
        let keep = 1.0 / (1.0 - self.p);
        let mask = Array2::from_shape_simple_fn(x.raw_dim(), || if r.random::<f64>() < self.p { 0.0 } else { keep });
        (x * &mask, Some(mask))
    }

    pub fn backward(mask: Option<&Array2<f64>>, dy: Array2<f64>) -> Array2<f64> {
        match mask {
            Some(m) => dy * m,
            None => dy,
        }
    }
}
