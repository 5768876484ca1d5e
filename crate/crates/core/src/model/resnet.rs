//! Residual CNN pathway: 7x7 stem, max-pool, four stages of basic blocks,
//! global average pool.

use ndarray::{Array2, Array4};

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, BatchNorm, BnCache, Conv2d, ConvCache, Ctx, Grads,
    Init, MaxPool, Param, PoolCache,
};

const BN_MOMENTUM: f64 = 0.1;

/// Two 3x3 conv/BN layers plus a shortcut (1x1 projection when the shape
/// changes); ReLU after the sum.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub downsample: Option<(Conv2d, BatchNorm)>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    c1: ConvCache,
    b1: BnCache,
    h1: Array4<f64>,
    c2: ConvCache,
    b2: BnCache,
    down: Option<(ConvCache, BnCache)>,
    out: Array4<f64>,
}

impl BasicBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        init.scoped(name, |init| Self {
            conv1: Conv2d::kaiming(init, "conv1", cin, cout, 3, stride, 1),
            bn1: BatchNorm::new(init, "bn1", cout, BN_MOMENTUM),
            conv2: Conv2d::kaiming(init, "conv2", cout, cout, 3, 1, 1),
            bn2: BatchNorm::new(init, "bn2", cout, BN_MOMENTUM),
            downsample: (stride != 1 || cin != cout).then(|| {
                init.scoped("downsample", |init| {
                    (Conv2d::kaiming(init, "0", cin, cout, 1, stride, 0), BatchNorm::new(init, "1", cout, BN_MOMENTUM))
                })
            }),
        })
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> (Array4<f64>, Option<BlockCache>) {
        let (short, down) = match &self.downsample {
            Some((conv, bn)) => {
                let (s, cc) = conv.forward(x.clone(), ctx);
                let (s, bc) = bn.forward(s, ctx);
                (s, cc.zip(bc))
            }
            None => (x.clone(), None),
        };
        let (h, c1) = self.conv1.forward(x, ctx);
        let (h, b1) = self.bn1.forward(h, ctx);
        let h1 = relu(h);
        let (h, c2) = self.conv2.forward(h1.clone(), ctx);
        let (h, b2) = self.bn2.forward(h, ctx);
        let out = relu(h + &short);
        let cache = ctx.record.then(|| BlockCache {
            c1: c1.expect("recorded"),
            b1: b1.expect("recorded"),
            h1,
            c2: c2.expect("recorded"),
            b2: b2.expect("recorded"),
            down,
            out: out.clone(),
        });
        (out, cache)
    }

    pub fn backward(&self, cache: &BlockCache, dy: Array4<f64>, grads: &mut Grads) -> Array4<f64> {
        let dsum = relu_backward(cache.out.view(), dy);
        let dshort = match (&self.downsample, &cache.down) {
            (Some((conv, bn)), Some((cc, bc))) => {
                let d = bn.backward(bc, dsum.clone(), grads);
                conv.backward(cc, &d, grads)
            }
            _ => dsum.clone(),
        };
        let d = self.bn2.backward(&cache.b2, dsum, grads);
        let d = self.conv2.backward(&cache.c2, &d, grads);
        let d = relu_backward(cache.h1.view(), d);
        let d = self.bn1.backward(&cache.b1, d, grads);
        self.conv1.backward(&cache.c1, &d, grads) + dshort
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
        if let Some((_, bn)) = &mut self.downsample {
            f(bn);
        }
    }

    pub fn absorb(&mut self, cache: &BlockCache) {
        self.bn1.absorb(&cache.b1);
        self.bn2.absorb(&cache.b2);
        if let (Some((_, bn)), Some((_, bc))) = (&mut self.downsample, &cache.down) {
            bn.absorb(bc);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.downsample {
            c.visit(f);
            b.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm,
    pub pool: MaxPool,
    /// Stage-major list of blocks.
    pub blocks: Vec<BasicBlock>,
    pub stage_of: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ResNetCache {
    stem: ConvCache,
    stem_bn: BnCache,
    stem_out: Array4<f64>,
    pool: PoolCache,
    blocks: Vec<BlockCache>,
    /// Output of the last block, the Grad-CAM target.
    pub feature_map: Array4<f64>,
}

impl ResNet {
    pub fn new(init: &mut Init, widths: &[usize], blocks_per_stage: &[usize]) -> Self {
        init.scoped("cnn", |init| {
            let mut stem = Conv2d::kaiming(init, "conv1", 3, widths[0], 7, 2, 3);
            stem.need_dx = false;
            let stem_bn = BatchNorm::new(init, "bn1", widths[0], BN_MOMENTUM);
            let mut blocks = Vec::new();
            let mut stage_of = Vec::new();
            let mut cin = widths[0];
            for (s, (&w, &nb)) in widths.iter().zip(blocks_per_stage).enumerate() {
                for b in 0..nb {
                    let stride = if s > 0 && b == 0 { 2 } else { 1 };
                    blocks.push(BasicBlock::new(init, &format!("layer{}.{b}", s + 1), cin, w, stride));
                    stage_of.push(s);
                    cin = w;
                }
            }
            Self { stem, stem_bn, pool: MaxPool { k: 3, stride: 2, pad: 1 }, blocks, stage_of }
        })
    }

    pub fn out_dim(&self) -> usize {
        self.blocks.last().map(|b| b.conv2.out_channels()).unwrap_or(self.stem.out_channels())
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> (Array2<f64>, Option<ResNetCache>) {
        let (h, stem) = self.stem.forward(x, ctx);
        let (h, stem_bn) = self.stem_bn.forward(h, ctx);
        let stem_out = relu(h);
        let (mut h, pool) = self.pool.forward(&stem_out, ctx);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (o, c) = b.forward(h, ctx);
            h = o;
            caches.extend(c);
        }
        let feat = global_avg_pool(&h);
        let cache = ctx.record.then(|| ResNetCache {
            stem: stem.expect("recorded"),
            stem_bn: stem_bn.expect("recorded"),
            stem_out,
            pool: pool.expect("recorded"),
            blocks: caches,
            feature_map: h,
        });
        (feat, cache)
    }

    /// Gradient of the pooled feature w.r.t. the last feature map.
    pub fn feature_map_grad(cache: &ResNetCache, dfeat: &Array2<f64>) -> Array4<f64> {
        let (_, _, h, w) = cache.feature_map.dim();
        global_avg_pool_backward(dfeat, h, w)
    }

    pub fn backward(&self, cache: &ResNetCache, dfeat: &Array2<f64>, grads: &mut Grads) {
        let mut d = Self::feature_map_grad(cache, dfeat);
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            d = b.backward(c, d, grads);
        }
        let d = self.pool.backward(&cache.pool, &d);
        let d = relu_backward(cache.stem_out.view(), d);
        let d = self.stem_bn.backward(&cache.stem_bn, d, grads);
        self.stem.backward(&cache.stem, &d, grads);
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.stem_bn);
        for b in &mut self.blocks {
            b.visit_bn_mut(f);
        }
    }

    pub fn absorb(&mut self, cache: &ResNetCache) {
        self.stem_bn.absorb(&cache.stem_bn);
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.absorb(c);
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check;
    use ndarray::Ix4;

    #[test]
    fn zero_residual_branch_is_identity() {
        let mut init = Init::new(0);
        let mut block = BasicBlock::new(&mut init, "b", 4, 4, 1);
        block.conv2.weight.value.fill(0.0);
        let x = check::random(&[2, 4, 6, 6], 1).mapv(f64::abs).into_dimensionality::<Ix4>().unwrap();
        let (y, _) = block.forward(x.clone(), &Ctx::eval());
        assert_eq!(y, x);
        let (y, _) = block.forward(x.clone(), &Ctx::train(0));
        assert_eq!(y, x);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut init = Init::new(0);
        let mut block = BasicBlock::new(&mut init, "b", 2, 3, 2);
        let x = check::random(&[2, 2, 6, 6], 1);
        let x4 = x.clone().into_dimensionality::<Ix4>().unwrap();
        let ctx = Ctx::train(0);
        let (y, c) = block.forward(x4.clone(), &ctx);
        let r = check::random(y.shape(), 2);
        let mut g = Grads::new(init.issued());
        let dx = block.backward(c.as_ref().unwrap(), r.clone().into_dimensionality().unwrap(), &mut g);
        let f = |b: &BasicBlock, x: &Array4<f64>| check::dot(&b.forward(x.clone(), &ctx).0.into_dyn(), &r);
        check::compare(&x, &dx.into_dyn(), 40, 1e-4, |x| f(&block, &x.clone().into_dimensionality().unwrap()));
        let w0 = block.conv1.weight.value.clone();
        let gw = g.get(block.conv1.weight.id).unwrap().clone();
        check::compare(&w0, &gw, 30, 1e-4, |v| {
            block.conv1.weight.value = v.clone();
            f(&block, &x4)
        });
    }

    #[test]
    fn tiny_widths_give_64_features() {
        let mut init = Init::new(0);
        let net = ResNet::new(&mut init, &[8, 16, 32, 64], &[2, 2, 2, 2]);
        let x = check::random(&[1, 3, 64, 64], 1).into_dimensionality::<Ix4>().unwrap();
        let (f, _) = net.forward(x, &Ctx::eval());
        assert_eq!(f.dim(), (1, 64));
        assert_eq!(net.out_dim(), 64);
    }
}
