//! Projection head fusing the two pathway features into the embedding.

use ndarray::Array2;

use crate::nn::{relu, relu_backward, BatchNorm, BnCache, Ctx, Dropout, Grads, Init, Linear, LinearCache, Param};

/// `Linear -> BN -> ReLU -> Dropout -> Linear -> BN`.
#[derive(Debug, Clone)]
pub struct Head {
    pub fc1: Linear,
    pub bn1: BatchNorm,
    pub dropout: Dropout,
    pub fc2: Linear,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    fc1: LinearCache,
    bn1: BnCache,
    h: Array2<f64>,
    mask: Option<Array2<f64>>,
    fc2: LinearCache,
    bn2: BnCache,
}

impl Head {
    pub fn new(init: &mut Init, d_in: usize, hidden: usize, d_out: usize, momentum: f64, dropout: f64) -> Self {
        init.scoped("head", |init| Self {
            fc1: Linear::uniform(init, "fc1", d_in, hidden),
            bn1: BatchNorm::new(init, "bn1", hidden, momentum),
            dropout: Dropout { p: dropout },
            fc2: Linear::uniform(init, "fc2", hidden, d_out),
            bn2: BatchNorm::new(init, "bn2", d_out, momentum),
        })
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in()
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out()
    }

    pub fn forward(&self, z: Array2<f64>, ctx: &Ctx) -> (Array2<f64>, Option<HeadCache>) {
        let (a, fc1) = self.fc1.forward(z, ctx);
        let (a, bn1) = self.bn1.forward2(a, ctx);
        let h = relu(a);
        let (d, mask) = self.dropout.forward(h.clone(), ctx.train, ctx.dropout_seed);
        let (o, fc2) = self.fc2.forward(d, ctx);
        let (g, bn2) = self.bn2.forward2(o, ctx);
        let cache = ctx.record.then(|| HeadCache {
            fc1: fc1.expect("recorded"),
            bn1: bn1.expect("recorded"),
            h,
            mask,
            fc2: fc2.expect("recorded"),
            bn2: bn2.expect("recorded"),
        });
        (g, cache)
    }

    pub fn backward(&self, c: &HeadCache, dg: Array2<f64>, grads: &mut Grads) -> Array2<f64> {
        let d = self.bn2.backward2(&c.bn2, dg, grads);
        let d = self.fc2.backward(&c.fc2, &d, grads);
        let d = Dropout::backward(c.mask.as_ref(), d);
        let d = relu_backward(c.h.view(), d);
        let d = self.bn1.backward2(&c.bn1, d, grads);
        self.fc1.backward(&c.fc1, &d, grads)
    }

    pub fn visit_bn_mut(&mut self, f: &mut dyn FnMut(&mut BatchNorm)) {
        f(&mut self.bn1);
        f(&mut self.bn2);
    }

    pub fn absorb(&mut self, c: &HeadCache) {
        self.bn1.absorb(&c.bn1);
        self.bn2.absorb(&c.bn2);
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.fc1.visit(f);
        self.bn1.visit(f);
        self.fc2.visit(f);
        self.bn2.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.fc2.visit_mut(f);
        self.bn2.visit_mut(f);
    }
}
