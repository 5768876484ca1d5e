use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis, Ix2};

use super::{Ctx, Grads, Init, Param};
use crate::par;

/// 2-D convolution computed per sample as an im2col GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    /// Skip the input gradient (first layer of a pathway).
    pub need_dx: bool,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    x: Array4<f64>,
}

/// Unfolds one `(C, H, W)` sample into `(C k k, Ho Wo)` columns.
fn im2col(x: ArrayView3<'_, f64>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row-major");
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![ci, iy as usize, ..]);
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds columns back, summing overlapping contributions.
fn col2im(cols: ArrayView2<'_, f64>, (c, h, w): (usize, usize, usize), k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array3<f64> {
    let mut x = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[[ci, iy as usize, ix as usize]] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

impl Conv2d {
    /// Kaiming-normal weights in fan-out mode, no bias.
    pub fn kaiming(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        init.scoped(name, |init| Self {
            weight: init.normal("weight", &[cout, cin, k, k], std),
            bias: None,
            stride,
            pad,
            need_dx: true,
        })
    }

    /// Truncated-normal weights (std 0.02) with zero bias, for patch embedding.
    pub fn patch(init: &mut Init, name: &str, cin: usize, cout: usize, p: usize) -> Self {
        init.scoped(name, |init| Self {
            weight: init.trunc_normal("weight", &[cout, cin, p, p], 0.02),
            bias: Some(init.zeros("bias", &[cout])),
            stride: p,
            pad: 0,
            need_dx: true,
        })
    }

    pub fn k(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.k();
        ((h + 2 * self.pad - k) / self.stride + 1, (w + 2 * self.pad - k) / self.stride + 1)
    }

    fn w2(&self) -> ArrayView2<'_, f64> {
        let o = self.out_channels();
        self.weight
            .value
            .view()
            .into_shape_with_order((o, self.weight.value.len() / o))
            .expect("contiguous weight")
            .into_dimensionality::<Ix2>()
            .expect("2-d")
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> (Array4<f64>, Option<ConvCache>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let (k, stride, pad) = (self.k(), self.stride, self.pad);
        let wmat = self.w2();
        let bias = self.bias.as_ref().map(|b| b.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d"));
        let mut y = Array4::zeros((n, self.out_channels(), ho, wo));
        par::for_each_outer(y.view_mut(), |i, mut yi| {
            let cols = im2col(x.index_axis(Axis(0), i), k, stride, pad, ho, wo);
            let mut out = yi.view_mut().into_shape_with_order((wmat.nrows(), ho * wo)).expect("contiguous");
            general_mat_mul(1.0, &wmat, &cols, 0.0, &mut out);
            if let Some(b) = &bias {
                for (mut row, &bv) in out.rows_mut().into_iter().zip(b.iter()) {
                    row += bv;
                }
            }
        });
        (y, ctx.record.then_some(ConvCache { x }))
    }

    /// Returns the input gradient, or an empty array when `need_dx` is off.
    pub fn backward(&self, cache: &ConvCache, dy: &Array4<f64>, grads: &mut Grads) -> Array4<f64> {
        let x = &cache.x;
        let (n, c, h, w) = x.dim();
        let (_, o, ho, wo) = dy.dim();
        let (k, stride, pad) = (self.k(), self.stride, self.pad);
        let wmat = self.w2();
        let dy2 = |i: usize| dy.index_axis(Axis(0), i).into_shape_with_order((o, ho * wo)).expect("contiguous");

        if grads.params {
            let chunk = n.div_ceil(par::threads().max(1)).max(1);
            let dw = par::map_reduce(
                n.div_ceil(chunk),
                |ci| {
                    let mut acc = Array2::<f64>::zeros(wmat.raw_dim());
                    for i in ci * chunk..((ci + 1) * chunk).min(n) {
                        let cols = im2col(x.index_axis(Axis(0), i), k, stride, pad, ho, wo);
                        general_mat_mul(1.0, &dy2(i), &cols.t(), 1.0, &mut acc);
                    }
                    acc
                },
                |a, b| a + b,
            )
            .expect("non-empty batch");
            grads.add(&self.weight, dw.into_shape_with_order(self.weight.value.raw_dim()).expect("shape").into_dyn());
            if let Some(b) = &self.bias {
                grads.add(b, dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn());
            }
        }
        if !self.need_dx {
            return Array4::zeros((0, 0, 0, 0));
        }
        let mut dx = Array4::zeros((n, c, h, w));
        par::for_each_outer(dx.view_mut(), |i, mut dxi| {
            let dcols = wmat.t().dot(&dy2(i));
            dxi.assign(&col2im(dcols.view(), (c, h, w), k, stride, pad, ho, wo));
        });
        dx
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

/// Max pooling with a square window; padding never wins the max.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct PoolCache {
    in_dim: (usize, usize, usize, usize),
    argmax: Array4<u32>,
}

impl MaxPool {
    pub fn forward(&self, x: &Array4<f64>, ctx: &Ctx) -> (Array4<f64>, Option<PoolCache>) {
        let (n, c, h, w) = x.dim();
        let ho = (h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.k) / self.stride + 1;
        let mut y = Array4::zeros((n, c, ho, wo));
        let mut arg = Array4::<u32>::zeros((n, c, ho, wo));
        ndarray::Zip::indexed(&mut y).and(&mut arg).for_each(|(ni, ci, oy, ox), v, a| {
            let mut best = f64::NEG_INFINITY;
            let mut at = 0u32;
            for ky in 0..self.k {
                let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..self.k {
                    let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let val = x[[ni, ci, iy as usize, ix as usize]];
                    if val > best {
                        best = val;
                        at = (iy as usize * w + ix as usize) as u32;
                    }
                }
            }
            *v = best;
            *a = at;
        });
        (y, ctx.record.then_some(PoolCache { in_dim: (n, c, h, w), argmax: arg }))
    }

    pub fn backward(&self, cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = cache.in_dim;
        let mut dx = Array4::zeros((n, c, h, w));
        ndarray::Zip::indexed(dy).and(&cache.argmax).for_each(|(ni, ci, _, _), &g, &a| {
            let a = a as usize;
            dx[[ni, ci, a / w, a % w]] += g;
        });
        dx
    }
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
pub fn global_avg_pool(x: &Array4<f64>) -> Array2<f64> {
    let (_, _, h, w) = x.dim();
    x.sum_axis(Axis(3)).sum_axis(Axis(2)) / (h * w) as f64
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, h: usize, w: usize) -> Array4<f64> {
    let (n, c) = dy.dim();
    let scaled = dy / (h * w) as f64;
    scaled
        .into_shape_with_order((n, c, 1, 1))
        .expect("contiguous")
        .broadcast((n, c, h, w))
        .expect("broadcast")
        .to_owned()
}

/// Direct (loop) convolution used as a test oracle.
#[cfg(test)]
pub(crate) fn conv_direct(x: &Array4<f64>, wgt: &ndarray::ArrayD<f64>, stride: usize, pad: usize) -> Array4<f64> {
    let wgt = wgt.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (n, c, h, w) = x.dim();
    let (o, _, k, _) = wgt.dim();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    Array4::from_shape_fn((n, o, ho, wo), |(ni, oi, oy, ox)| {
        let mut acc = 0.0;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += x[[ni, ci, iy as usize, ix as usize]] * wgt[[oi, ci, ky, kx]];
                    }
                }
            }
        }
        acc
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check;

    #[test]
    fn matches_direct_convolution() {
        let mut init = Init::new(3);
        for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (4, 4, 0)] {
            let conv = Conv2d::kaiming(&mut init, "c", 2, 3, k, stride, pad);
            let x = check::random(&[2, 2, 9, 8], 4).into_dimensionality::<ndarray::Ix4>().unwrap();
            let (y, _) = conv.forward(x.clone(), &Ctx::eval());
            let want = conv_direct(&x, &conv.weight.value, stride, pad);
            assert_eq!(y.dim(), want.dim());
            assert!(y.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut init = Init::new(1);
        let mut conv = Conv2d::patch(&mut init, "c", 2, 3, 2);
        conv.stride = 1;
        conv.pad = 1;
        conv.weight.value = check::random(&[3, 2, 2, 2], 9);
        let x = check::random(&[2, 2, 5, 4], 1);
        let x4 = x.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (y, c) = conv.forward(x4.clone(), &Ctx::train(0));
        let r = check::random(y.shape(), 2);
        let mut g = Grads::new(init.issued());
        let dx = conv.backward(c.as_ref().unwrap(), &r.clone().into_dimensionality().unwrap(), &mut g);
        let f = |conv: &Conv2d, x: &Array4<f64>| check::dot(&conv.forward(x.clone(), &Ctx::eval()).0.into_dyn(), &r);
        check::compare(&x, &dx.into_dyn(), 40, 1e-6, |x| f(&conv, &x.clone().into_dimensionality().unwrap()));
        let w0 = conv.weight.value.clone();
        let gw = g.get(conv.weight.id).unwrap().clone();
        check::compare(&w0, &gw, 24, 1e-6, |v| {
            conv.weight.value = v.clone();
            f(&conv, &x4)
        });
        let b0 = conv.bias.as_ref().unwrap().value.clone();
        let gb = g.get(conv.bias.as_ref().unwrap().id).unwrap().clone();
        check::compare(&b0, &gb, 3, 1e-6, |v| {
            conv.bias.as_mut().unwrap().value = v.clone();
            f(&conv, &x4)
        });
    }

    #[test]
    fn maxpool_shape_and_gradient() {
        let pool = MaxPool { k: 3, stride: 2, pad: 1 };
        let x = check::random(&[1, 2, 8, 8], 5);
        let x4 = x.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (y, c) = pool.forward(&x4, &Ctx::train(0));
        assert_eq!(y.dim(), (1, 2, 4, 4));
        let r = check::random(y.shape(), 6);
        let dx = pool.backward(c.as_ref().unwrap(), &r.clone().into_dimensionality().unwrap());
        check::compare(&x, &dx.into_dyn(), 64, 1e-6, |x| {
            check::dot(&pool.forward(&x.clone().into_dimensionality().unwrap(), &Ctx::eval()).0.into_dyn(), &r)
        });
    }

    #[test]
    fn gap_gradient() {
        let x = check::random(&[2, 3, 4, 5], 1);
        let r = check::random(&[2, 3], 2);
        let dx = global_avg_pool_backward(&r.clone().into_dimensionality().unwrap(), 4, 5);
        check::compare(&x, &dx.into_dyn(), 30, 1e-6, |x| {
            check::dot(&global_avg_pool(&x.clone().into_dimensionality().unwrap()).into_dyn(), &r)
        });
    }
}
