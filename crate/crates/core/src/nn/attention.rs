use ndarray::{s, Array1, Array2, Array3, ArrayView2, Ix2};

use super::act::softmax_rows;
use super::{Ctx, Grads, Init, Linear, LinearCache, Param};
use crate::par;

/// Token bookkeeping for (shifted) window attention over `n` images of
/// `h x w` tokens stored row-major as `(n h w, C)`.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
    /// Window-ordered row -> raster row (roll by `-shift`, then partition).
    perm: Vec<usize>,
    /// `(windows per image, M^2, M^2)` additive mask for shifted windows.
    mask: Option<Array3<f64>>,
}

impl WindowLayout {
    pub fn new(n: usize, h: usize, w: usize, window: usize, shift: usize) -> Self {
        let m = window;
        assert!(h % m == 0 && w % m == 0, "token grid {h}x{w} not divisible by window {m}");
        let (nwy, nwx) = (h / m, w / m);
        let mut perm = Vec::with_capacity(n * h * w);
        for b in 0..n {
            for wy in 0..nwy {
                for wx in 0..nwx {
                    for ty in 0..m {
                        for tx in 0..m {
                            let y = (wy * m + ty + shift) % h;
                            let x = (wx * m + tx + shift) % w;
                            perm.push(b * h * w + y * w + x);
                        }
                    }
                }
            }
        }
        let mask = (shift > 0).then(|| {
            let region = |v: usize, len: usize| {
                if v < len - m {
                    0
                } else if v < len - shift {
                    1
                } else {
                    2
                }
            };
            let mut mask = Array3::zeros((nwy * nwx, m * m, m * m));
            for wy in 0..nwy {
                for wx in 0..nwx {
                    let ids: Vec<usize> = (0..m * m)
                        .map(|t| region(wy * m + t / m, h) * 3 + region(wx * m + t % m, w))
                        .collect();
                    let mut mw = mask.slice_mut(s![wy * nwx + wx, .., ..]);
                    for i in 0..m * m {
                        for j in 0..m * m {
                            if ids[i] != ids[j] {
                                mw[[i, j]] = -100.0;
                            }
                        }
                    }
                }
            }
            mask
        });
        Self { n, h, w, window, shift, perm, mask }
    }

    pub fn windows_per_image(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window * self.window
    }

    fn gather(&self, x: &Array2<f64>) -> Array2<f64> {
        let c = x.ncols();
        let mut out = Array2::zeros((self.perm.len(), c));
        for (r, &src) in self.perm.iter().enumerate() {
            out.row_mut(r).assign(&x.row(src));
        }
        out
    }

    fn scatter(&self, xw: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(xw.raw_dim());
        for (r, &dst) in self.perm.iter().enumerate() {
            out.row_mut(dst).assign(&xw.row(r));
        }
        out
    }
}

/// Multi-head self-attention inside local windows with a learned relative
/// position bias table of shape `((2M-1)^2, heads)`.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub rel_bias: Param,
    pub heads: usize,
    pub window: usize,
    rel_index: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    layout_shift: usize,
    qkv_in: LinearCache,
    qkv_out: Array2<f64>,
    /// Probabilities per (window, head).
    attn: Vec<Array2<f64>>,
    proj: LinearCache,
}

impl AttnCache {
    /// Attention probabilities for window `w` and head `h`.
    pub fn attention(&self, w: usize, h: usize, heads: usize) -> &Array2<f64> {
        &self.attn[w * heads + h]
    }
}

fn relative_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let mut idx = Vec::with_capacity(t * t);
    for i in 0..t {
        for j in 0..t {
            let (yi, xi) = (i / m, i % m);
            let (yj, xj) = (j / m, j % m);
            idx.push((yi + m - 1 - yj) * (2 * m - 1) + (xi + m - 1 - xj));
        }
    }
    idx
}

/// `softmax(q k^T + bias) v` for one window and head; `q` is pre-scaled.
pub fn attend(q: ArrayView2<'_, f64>, k: ArrayView2<'_, f64>, v: ArrayView2<'_, f64>, bias: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let mut s = q.dot(&k.t());
    s += bias;
    softmax_rows(&mut s);
    let out = s.dot(&v);
    (out, s)
}

impl WindowAttention {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        init.scoped(name, |init| Self {
            rel_bias: init.zeros("relative_position_bias_table", &[(2 * window - 1).pow(2), heads]),
            qkv: Linear::trunc_normal(init, "qkv", dim, 3 * dim, true),
            proj: Linear::trunc_normal(init, "proj", dim, dim, true),
            heads,
            window,
            rel_index: relative_index(window),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.d_out()
    }

    fn bias_for(&self, head: usize, layout: &WindowLayout, win: usize) -> Array2<f64> {
        let t = self.window * self.window;
        let table = self.rel_bias.value.view().into_dimensionality::<Ix2>().expect("2-d table");
        let mut b = Array2::from_shape_fn((t, t), |(i, j)| table[[self.rel_index[i * t + j], head]]);
        if let Some(mask) = &layout.mask {
            b += &mask.slice(s![win % layout.windows_per_image(), .., ..]);
        }
        b
    }

    /// `x` is `(n h w, C)` in raster order.
    pub fn forward(&self, x: &Array2<f64>, layout: &WindowLayout, ctx: &Ctx) -> (Array2<f64>, Option<AttnCache>) {
        let c = self.dim();
        let d = c / self.heads;
        let t = layout.tokens_per_window();
        let scale = (d as f64).powf(-0.5);
        let xw = layout.gather(x);
        let (qkv, qkv_in) = self.qkv.forward(xw, ctx);
        let n_win = layout.n * layout.windows_per_image();
        let per_window = par::map_range(n_win, |wi| {
            let rows = qkv.slice(s![wi * t..(wi + 1) * t, ..]);
            let mut out = Array2::zeros((t, c));
            let mut probs = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let q = &rows.slice(s![.., h * d..(h + 1) * d]) * scale;
                let k = rows.slice(s![.., c + h * d..c + (h + 1) * d]);
                let v = rows.slice(s![.., 2 * c + h * d..2 * c + (h + 1) * d]);
                let (o, a) = attend(q.view(), k, v, &self.bias_for(h, layout, wi));
                out.slice_mut(s![.., h * d..(h + 1) * d]).assign(&o);
                if ctx.record {
                    probs.push(a);
                }
            }
            (out, probs)
        });
        let mut merged = Array2::zeros((n_win * t, c));
        let mut attn = Vec::new();
        for (wi, (o, p)) in per_window.into_iter().enumerate() {
            merged.slice_mut(s![wi * t..(wi + 1) * t, ..]).assign(&o);
            attn.extend(p);
        }
        let (yw, proj) = self.proj.forward(merged, ctx);
        let y = layout.scatter(&yw);
        let cache = ctx.record.then(|| AttnCache {
            layout_shift: layout.shift,
            qkv_in: qkv_in.expect("recorded"),
            qkv_out: qkv,
            attn,
            proj: proj.expect("recorded"),
        });
        (y, cache)
    }

    pub fn backward(&self, cache: &AttnCache, dy: &Array2<f64>, layout: &WindowLayout, grads: &mut Grads) -> Array2<f64> {
        debug_assert_eq!(cache.layout_shift, layout.shift);
        let c = self.dim();
        let d = c / self.heads;
        let t = layout.tokens_per_window();
        let scale = (d as f64).powf(-0.5);
        let dyw = layout.gather(dy);
        let dmerged = self.proj.backward(&cache.proj, &dyw, grads);
        let qkv = &cache.qkv_out;
        let n_win = layout.n * layout.windows_per_image();
        let per_window = par::map_range(n_win, |wi| {
            let rows = qkv.slice(s![wi * t..(wi + 1) * t, ..]);
            let dout = dmerged.slice(s![wi * t..(wi + 1) * t, ..]);
            let mut dqkv = Array2::zeros((t, 3 * c));
            let mut dbias = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let a = &cache.attn[wi * self.heads + h];
                let q = &rows.slice(s![.., h * d..(h + 1) * d]) * scale;
                let k = rows.slice(s![.., c + h * d..c + (h + 1) * d]);
                let v = rows.slice(s![.., 2 * c + h * d..2 * c + (h + 1) * d]);
                let dout_h = dout.slice(s![.., h * d..(h + 1) * d]);
                let dv = a.t().dot(&dout_h);
                let da = dout_h.dot(&v.t());
                let mut ds = &da * a;
                let row_sums: Array1<f64> = ds.sum_axis(ndarray::Axis(1));
                for (mut r, (ar, &rs)) in ds.rows_mut().into_iter().zip(a.rows().into_iter().zip(row_sums.iter())) {
                    r.zip_mut_with(&ar, |g, &p| *g -= p * rs);
                }
                let dq = ds.dot(&k) * scale;
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., h * d..(h + 1) * d]).assign(&dq);
                dqkv.slice_mut(s![.., c + h * d..c + (h + 1) * d]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * c + h * d..2 * c + (h + 1) * d]).assign(&dv);
                dbias.push(ds);
            }
            (dqkv, dbias)
        });
        let mut dqkv_all = Array2::zeros((n_win * t, 3 * c));
        let mut dtable = Array2::<f64>::zeros(((2 * self.window - 1).pow(2), self.heads));
        for (wi, (dq, db)) in per_window.into_iter().enumerate() {
            dqkv_all.slice_mut(s![wi * t..(wi + 1) * t, ..]).assign(&dq);
            if grads.params {
                for (h, ds) in db.iter().enumerate() {
                    for (ij, &g) in ds.iter().enumerate() {
                        dtable[[self.rel_index[ij], h]] += g;
                    }
                }
            }
        }
        if grads.params {
            grads.add(&self.rel_bias, dtable.into_dyn());
        }
        let dxw = self.qkv.backward(&cache.qkv_in, &dqkv_all, grads);
        layout.scatter(&dxw)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.rel_bias);
        self.qkv.visit(f);
        self.proj.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.rel_bias);
        self.qkv.visit_mut(f);
        self.proj.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check;

    #[test]
    fn attend_matches_reference_on_toy_window() {
        // Four tokens, one head, zero bias, identity-row values.
        let q = check::random(&[4, 4], 1).into_dimensionality::<Ix2>().unwrap();
        let k = check::random(&[4, 4], 2).into_dimensionality::<Ix2>().unwrap();
        let v = Array2::<f64>::eye(4);
        let dk = 4.0f64;
        let qs = &q / dk.sqrt();
        let (out, attn) = attend(qs.view(), k.view(), v.view(), &Array2::zeros((4, 4)));
        for i in 0..4 {
            let logits: Vec<f64> = (0..4).map(|j| (0..4).map(|e| q[[i, e]] * k[[j, e]]).sum::<f64>() / dk.sqrt()).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..4 {
                let want = logits[j].exp() / z;
                assert!((out[[i, j]] - want).abs() < 1e-12);
                assert!((attn[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn relative_index_examples() {
        let idx = relative_index(2);
        // Same token -> centre of the 3x3 table.
        assert_eq!(idx[0], 4);
        // Token (0,0) attending to (1,1): offset (-1,-1).
        assert_eq!(idx[3], 0);
        assert_eq!(idx[3 * 4], 8);
    }

    #[test]
    fn shift_mask_regions() {
        let l = WindowLayout::new(1, 4, 4, 2, 1);
        let mask = l.mask.as_ref().unwrap();
        // Top-left window is entirely inside region 0.
        assert!(mask.slice(s![0, .., ..]).iter().all(|&v| v == 0.0));
        // Bottom-right window mixes four regions.
        let br = mask.slice(s![3, .., ..]);
        assert_eq!(br.iter().filter(|&&v| v != 0.0).count(), 12);
        let mut seen = l.perm.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn rows_sum_to_one() {
        let mut init = Init::new(2);
        let att = WindowAttention::new(&mut init, "a", 8, 2, 2);
        let layout = WindowLayout::new(2, 4, 4, 2, 1);
        let x = check::random(&[32, 8], 3).into_dimensionality::<Ix2>().unwrap() * 5.0;
        let (_, c) = att.forward(&x, &layout, &Ctx::eval_recording());
        let c = c.unwrap();
        for w in 0..8 {
            for h in 0..2 {
                for row in c.attention(w, h, 2).rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut init = Init::new(4);
        let mut att = WindowAttention::new(&mut init, "a", 4, 2, 2);
        att.rel_bias.value = check::random(att.rel_bias.value.shape(), 5);
        att.qkv.weight.value = check::random(att.qkv.weight.value.shape(), 6) * 0.5;
        for shift in [0, 1] {
            let layout = WindowLayout::new(1, 4, 4, 2, shift);
            let x = check::random(&[16, 4], 7);
            let x2 = x.clone().into_dimensionality::<Ix2>().unwrap();
            let r = check::random(&[16, 4], 8);
            let (_, c) = att.forward(&x2, &layout, &Ctx::train(0));
            let mut g = Grads::new(init.issued());
            let dx = att.backward(c.as_ref().unwrap(), &r.clone().into_dimensionality().unwrap(), &layout, &mut g);
            let f = |att: &WindowAttention, x: &Array2<f64>| check::dot(&att.forward(x, &layout, &Ctx::eval()).0.into_dyn(), &r);
            check::compare(&x, &dx.into_dyn(), 64, 1e-5, |x| f(&att, &x.clone().into_dimensionality().unwrap()));
            let b0 = att.rel_bias.value.clone();
            let gb = g.get(att.rel_bias.id).unwrap().clone();
            check::compare(&b0, &gb, 18, 1e-5, |v| {
                att.rel_bias.value = v.clone();
                f(&att, &x2)
            });
            att.rel_bias.value = b0;
            let w0 = att.qkv.weight.value.clone();
            let gw = g.get(att.qkv.weight.id).unwrap().clone();
            check::compare(&w0, &gw, 48, 1e-5, |v| {
                att.qkv.weight.value = v.clone();
                f(&att, &x2)
            });
            att.qkv.weight.value = w0;
        }
    }
}
