//! Shifted-window transformer pathway: patch embedding, four stages of
//! window-attention blocks with patch merging in between, final norm and
//! mean pooling over tokens.

use ndarray::{s, Array2, Array4, Axis};

use crate::nn::{
    gelu, gelu_backward, Conv2d, ConvCache, Ctx, Grads, Init, LayerNorm, Linear, LinearCache, LnCache, Param,
    WindowAttention, WindowLayout, AttnCache,
};

#[derive(Debug, Clone)]
pub struct SwinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub shift: usize,
}

#[derive(Debug, Clone)]
pub struct SwinBlockCache {
    n1: LnCache,
    attn: AttnCache,
    n2: LnCache,
    fc1: LinearCache,
    pre_gelu: Array2<f64>,
    fc2: LinearCache,
}

impl SwinBlock {
    pub fn new(init: &mut Init, name: &str, dim: usize, heads: usize, window: usize, shift: usize) -> Self {
        init.scoped(name, |init| Self {
            norm1: LayerNorm::new(init, "norm1", dim),
            attn: WindowAttention::new(init, "attn", dim, heads, window),
            norm2: LayerNorm::new(init, "norm2", dim),
            fc1: Linear::trunc_normal(init, "mlp.fc1", dim, 4 * dim, true),
            fc2: Linear::trunc_normal(init, "mlp.fc2", 4 * dim, dim, true),
            shift,
        })
    }

    pub fn forward(&self, x: Array2<f64>, layout: &WindowLayout, ctx: &Ctx) -> (Array2<f64>, Option<SwinBlockCache>) {
        let (h, n1) = self.norm1.forward(&x, ctx);
        let (a, attn) = self.attn.forward(&h, layout, ctx);
        let x = x + &a;
        let (h, n2) = self.norm2.forward(&x, ctx);
        let (pre, fc1) = self.fc1.forward(h, ctx);
        let act = gelu(pre.view());
        let (m, fc2) = self.fc2.forward(act, ctx);
        let y = x + &m;
        let cache = ctx.record.then(|| SwinBlockCache {
            n1: n1.expect("recorded"),
            attn: attn.expect("recorded"),
            n2: n2.expect("recorded"),
            fc1: fc1.expect("recorded"),
            pre_gelu: pre,
            fc2: fc2.expect("recorded"),
        });
        (y, cache)
    }

    pub fn backward(&self, c: &SwinBlockCache, dy: Array2<f64>, layout: &WindowLayout, grads: &mut Grads) -> Array2<f64> {
        let d = self.fc2.backward(&c.fc2, &dy, grads);
        let d = gelu_backward(c.pre_gelu.view(), d);
        let d = self.fc1.backward(&c.fc1, &d, grads);
        let dx = dy + &self.norm2.backward(&c.n2, &d, grads);
        let d = self.attn.backward(&c.attn, &dx, layout, grads);
        let d = self.norm1.backward(&c.n1, &d, grads);
        dx + &d
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm1.visit(f);
        self.attn.visit(f);
        self.norm2.visit(f);
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm1.visit_mut(f);
        self.attn.visit_mut(f);
        self.norm2.visit_mut(f);
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// 2x2 neighbourhood concatenation (`4C`), LayerNorm, linear to `2C`.
#[derive(Debug, Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

#[derive(Debug, Clone)]
pub struct MergeCache {
    ln: LnCache,
    lin: LinearCache,
}

/// Source offsets of the four concatenated neighbours, as `(dy, dx)`.
const MERGE_ORDER: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

impl PatchMerging {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        init.scoped(name, |init| Self {
            norm: LayerNorm::new(init, "norm", 4 * dim),
            reduction: Linear::trunc_normal(init, "reduction", 4 * dim, 2 * dim, false),
        })
    }

    fn gather(x: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
        let c = x.ncols();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Array2::zeros((n * h2 * w2, 4 * c));
        for b in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let r = (b * h2 + i) * w2 + j;
                    for (q, (dy, dx)) in MERGE_ORDER.iter().enumerate() {
                        let src = (b * h + 2 * i + dy) * w + 2 * j + dx;
                        out.slice_mut(s![r, q * c..(q + 1) * c]).assign(&x.row(src));
                    }
                }
            }
        }
        out
    }

    fn scatter(d: &Array2<f64>, n: usize, h: usize, w: usize) -> Array2<f64> {
        let c = d.ncols() / 4;
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Array2::zeros((n * h * w, c));
        for b in 0..n {
            for i in 0..h2 {
                for j in 0..w2 {
                    let r = (b * h2 + i) * w2 + j;
                    for (q, (dy, dx)) in MERGE_ORDER.iter().enumerate() {
                        let dst = (b * h + 2 * i + dy) * w + 2 * j + dx;
                        out.row_mut(dst).assign(&d.slice(s![r, q * c..(q + 1) * c]));
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Array2<f64>, n: usize, h: usize, w: usize, ctx: &Ctx) -> (Array2<f64>, Option<MergeCache>) {
        let g = Self::gather(x, n, h, w);
        let (g, ln) = self.norm.forward(&g, ctx);
        let (y, lin) = self.reduction.forward(g, ctx);
        (y, ln.zip(lin).map(|(ln, lin)| MergeCache { ln, lin }))
    }

    pub fn backward(&self, c: &MergeCache, dy: &Array2<f64>, n: usize, h: usize, w: usize, grads: &mut Grads) -> Array2<f64> {
        let d = self.reduction.backward(&c.lin, dy, grads);
        let d = self.norm.backward(&c.ln, &d, grads);
        Self::scatter(&d, n, h, w)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.norm.visit(f);
        self.reduction.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.norm.visit_mut(f);
        self.reduction.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct SwinStage {
    pub blocks: Vec<SwinBlock>,
    pub merge: Option<PatchMerging>,
    /// Token grid side at this stage.
    pub res: usize,
    /// Effective window (clamped to the grid).
    pub window: usize,
}

#[derive(Debug, Clone)]
pub struct Swin {
    pub patch_embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub stages: Vec<SwinStage>,
    pub norm: LayerNorm,
    pub patch: usize,
}

#[derive(Debug, Clone)]
pub struct SwinCache {
    n: usize,
    embed: ConvCache,
    embed_norm: LnCache,
    blocks: Vec<Vec<SwinBlockCache>>,
    merges: Vec<Option<MergeCache>>,
    /// Final-stage block output `(n res res, C)`, the Grad-CAM target.
    pub tokens: Array2<f64>,
    final_norm: LnCache,
}

/// Spatial geometry of one run.
pub struct SwinSpec<'a> {
    pub input: usize,
    pub patch: usize,
    pub dims: &'a [usize],
    pub depths: &'a [usize],
    pub heads: &'a [usize],
    pub window: usize,
}

impl Swin {
    pub fn new(init: &mut Init, spec: &SwinSpec<'_>) -> Self {
        init.scoped("swin", |init| {
            let patch_embed = Conv2d::patch(init, "patch_embed.proj", 3, spec.dims[0], spec.patch);
            let embed_norm = LayerNorm::new(init, "patch_embed.norm", spec.dims[0]);
            let mut res = spec.input / spec.patch;
            let mut stages = Vec::new();
            for (s, ((&dim, &depth), &heads)) in spec.dims.iter().zip(spec.depths).zip(spec.heads).enumerate() {
                let window = spec.window.min(res);
                let shifted = res > spec.window;
                let blocks = (0..depth)
                    .map(|b| {
                        let shift = if shifted && b % 2 == 1 { window / 2 } else { 0 };
                        SwinBlock::new(init, &format!("layers.{s}.blocks.{b}"), dim, heads, window, shift)
                    })
                    .collect();
                let last = s + 1 == spec.dims.len();
                let merge = (!last).then(|| PatchMerging::new(init, &format!("layers.{s}.downsample"), dim));
                stages.push(SwinStage { blocks, merge, res, window });
                if !last {
                    res /= 2;
                }
            }
            let norm = LayerNorm::new(init, "norm", *spec.dims.last().expect("at least one stage"));
            let mut patch_embed = patch_embed;
            patch_embed.need_dx = false;
            Self { patch_embed, embed_norm, stages, norm, patch: spec.patch }
        })
    }

    pub fn out_dim(&self) -> usize {
        self.norm.gamma.value.len()
    }

    pub fn final_res(&self) -> usize {
        self.stages.last().map(|s| s.res).unwrap_or(0)
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> (Array2<f64>, Option<SwinCache>) {
        let n = x.dim().0;
        let (e, embed) = self.patch_embed.forward(x, ctx);
        let (_, c, h, w) = e.dim();
        let tokens = e.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned().into_shape_with_order((n * h * w, c)).expect("contiguous");
        let (mut t, embed_norm) = self.embed_norm.forward(&tokens, ctx);
        let mut block_caches = Vec::new();
        let mut merge_caches = Vec::new();
        for stage in &self.stages {
            let mut caches = Vec::new();
            for b in &stage.blocks {
                let layout = WindowLayout::new(n, stage.res, stage.res, stage.window, b.shift);
                let (o, c) = b.forward(t, &layout, ctx);
                t = o;
                caches.extend(c);
            }
            block_caches.push(caches);
            if let Some(m) = &stage.merge {
                let (o, c) = m.forward(&t, n, stage.res, stage.res, ctx);
                t = o;
                merge_caches.push(c);
            } else {
                merge_caches.push(None);
            }
        }
        let (normed, final_norm) = self.norm.forward(&t, ctx);
        let l = normed.nrows() / n;
        let pooled = normed.into_shape_with_order((n, l, self.out_dim())).expect("contiguous").mean_axis(Axis(1)).expect("tokens");
        let cache = ctx.record.then(|| SwinCache {
            n,
            embed: embed.expect("recorded"),
            embed_norm: embed_norm.expect("recorded"),
            blocks: block_caches,
            merges: merge_caches,
            tokens: t,
            final_norm: final_norm.expect("recorded"),
        });
        (pooled, cache)
    }

    /// Gradient of the pooled feature w.r.t. the final-stage tokens.
    pub fn tokens_grad(&self, cache: &SwinCache, dfeat: &Array2<f64>) -> Array2<f64> {
        let n = cache.n;
        let l = cache.tokens.nrows() / n;
        let c = self.out_dim();
        let mut d = Array2::zeros((n * l, c));
        for b in 0..n {
            let row = dfeat.row(b).mapv(|v| v / l as f64);
            for t in 0..l {
                d.row_mut(b * l + t).assign(&row);
            }
        }
        self.norm.backward(&cache.final_norm, &d, &mut Grads::inputs_only())
    }

    pub fn backward(&self, cache: &SwinCache, dfeat: &Array2<f64>, grads: &mut Grads) {
        let n = cache.n;
        let l = cache.tokens.nrows() / n;
        let c = self.out_dim();
        let mut d = Array2::zeros((n * l, c));
        for b in 0..n {
            let row = dfeat.row(b).mapv(|v| v / l as f64);
            for t in 0..l {
                d.row_mut(b * l + t).assign(&row);
            }
        }
        let mut d = self.norm.backward(&cache.final_norm, &d, grads);
        for (si, stage) in self.stages.iter().enumerate().rev() {
            if let (Some(m), Some(mc)) = (&stage.merge, &cache.merges[si]) {
                d = m.backward(mc, &d, n, stage.res, stage.res, grads);
            }
            for (b, bc) in stage.blocks.iter().zip(&cache.blocks[si]).rev() {
                let layout = WindowLayout::new(n, stage.res, stage.res, stage.window, b.shift);
                d = b.backward(bc, d, &layout, grads);
            }
        }
        let d = self.embed_norm.backward(&cache.embed_norm, &d, grads);
        let res = self.stages[0].res;
        let c0 = d.ncols();
        let d4 = d
            .into_shape_with_order((n, res, res, c0))
            .expect("contiguous")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        self.patch_embed.backward(&cache.embed, &d4, grads);
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.patch_embed.visit(f);
        self.embed_norm.visit(f);
        for s in &self.stages {
            for b in &s.blocks {
                b.visit(f);
            }
            if let Some(m) = &s.merge {
                m.visit(f);
            }
        }
        self.norm.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.patch_embed.visit_mut(f);
        self.embed_norm.visit_mut(f);
        for s in &mut self.stages {
            for b in &mut s.blocks {
                b.visit_mut(f);
            }
            if let Some(m) = &mut s.merge {
                m.visit_mut(f);
            }
        }
        self.norm.visit_mut(f);
    }
}
