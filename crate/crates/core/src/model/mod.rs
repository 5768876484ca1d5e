//! The two-pathway hybrid encoder.
//!
//! A residual CNN and a shifted-window transformer read the same
//! standardised glyph; their pooled features are concatenated and passed
//! through a projection head to give the embedding used everywhere else.

mod checkpoint;
mod head;
mod resnet;
mod swin;

use ndarray::{concatenate, s, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use head::{Head, HeadCache};
pub use resnet::{BasicBlock, BlockCache, ResNet, ResNetCache};
pub use swin::{PatchMerging, Swin, SwinBlock, SwinCache, SwinSpec, SwinStage};

use crate::corpus::GlyphImage;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Grads, Init, Module, Param};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "tiny" => Ok(Self::Tiny),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub preset: Option<Preset>,
    pub input_size: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_blocks: Vec<usize>,
    pub swin_dims: Vec<usize>,
    pub swin_depths: Vec<usize>,
    pub swin_heads: Vec<usize>,
    pub window: usize,
    pub patch: usize,
    pub fusion_hidden: usize,
    pub embed_dim: usize,
    pub bn_momentum: f64,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn paper() -> Self {
        Self {
            preset: Some(Preset::Paper),
            input_size: 224,
            cnn_widths: vec![64, 128, 256, 512],
            cnn_blocks: vec![2, 2, 2, 2],
            swin_dims: vec![128, 256, 512, 1024],
            swin_depths: vec![2, 2, 18, 2],
            swin_heads: vec![4, 8, 16, 32],
            window: 7,
            patch: 4,
            fusion_hidden: 1024,
            embed_dim: 256,
            bn_momentum: 0.01,
            dropout: 0.1,
        }
    }

    /// Same topology with narrow stages and shallow transformer stages.
    pub fn tiny() -> Self {
        Self {
            preset: Some(Preset::Tiny),
            cnn_widths: vec![8, 16, 32, 64],
            swin_dims: vec![32, 64, 128, 256],
            swin_depths: vec![2, 2, 2, 2],
            swin_heads: vec![2, 2, 4, 4],
            fusion_hidden: 256,
            ..Self::paper()
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Tiny => Self::tiny(),
        }
    }

    pub fn cnn_out(&self) -> usize {
        *self.cnn_widths.last().unwrap_or(&0)
    }

    pub fn swin_out(&self) -> usize {
        *self.swin_dims.last().unwrap_or(&0)
    }

    pub fn concat_dim(&self) -> usize {
        self.cnn_out() + self.swin_out()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cnn_widths.is_empty() || self.cnn_widths.len() != self.cnn_blocks.len() {
            return bad("cnn_widths and cnn_blocks must be non-empty and equally long".into());
        }
        let n = self.swin_dims.len();
        if n == 0 || self.swin_depths.len() != n || self.swin_heads.len() != n {
            return bad("swin_dims, swin_depths and swin_heads must be non-empty and equally long".into());
        }
        for i in 0..n {
            if self.swin_heads[i] == 0 || self.swin_dims[i] % self.swin_heads[i] != 0 {
                return bad(format!("swin stage {i}: dim {} not divisible by {} heads", self.swin_dims[i], self.swin_heads[i]));
            }
            if i > 0 && self.swin_dims[i] != 2 * self.swin_dims[i - 1] {
                return bad(format!("swin stage {i}: patch merging doubles the width, expected {}", 2 * self.swin_dims[i - 1]));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("dropout must be in [0, 1) and bn_momentum in [0, 1]".into());
        }
        self.check_grid(self.input_size).map_err(|e| Error::Config(e.to_string()))
    }

    /// Token-grid compatibility of an input side with patch and window.
    pub fn check_grid(&self, side: usize) -> Result<()> {
        if self.patch == 0 || self.window == 0 || side % self.patch != 0 {
            return Err(Error::shape(format!("input side {side} not divisible by patch {}", self.patch)));
        }
        let mut res = side / self.patch;
        for s in 0..self.swin_dims.len() {
            let w = self.window.min(res);
            if w == 0 || res % w != 0 {
                return Err(Error::shape(format!("stage {s}: token grid {res} not divisible by window {}", self.window)));
            }
            if s + 1 < self.swin_dims.len() {
                if res % 2 != 0 {
                    return Err(Error::shape(format!("stage {s}: token grid {res} cannot be merged 2x2")));
                }
                res /= 2;
            }
        }
        Ok(())
    }
}

/// Per-batch pathway outputs.
#[derive(Debug, Clone)]
pub struct Features {
    pub cnn: Array2<f64>,
    pub swin: Array2<f64>,
    pub fused: Array2<f64>,
}

/// Features of one glyph.
#[derive(Debug, Clone)]
pub struct HybridEmbedding {
    pub cnn_feat: ndarray::Array1<f64>,
    pub swin_feat: ndarray::Array1<f64>,
    pub fused: ndarray::Array1<f64>,
}

impl Features {
    pub fn row(&self, i: usize) -> HybridEmbedding {
        HybridEmbedding {
            cnn_feat: self.cnn.row(i).to_owned(),
            swin_feat: self.swin.row(i).to_owned(),
            fused: self.fused.row(i).to_owned(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    pub cnn: ResNetCache,
    pub swin: SwinCache,
    pub head: HeadCache,
}

#[derive(Debug, Clone)]
pub struct HybridEncoder {
    pub config: EncoderConfig,
    pub seed: u64,
    pub cnn: ResNet,
    pub swin: Swin,
    pub head: Head,
}

/// Stacks standardised glyphs into an `(N, 3, S, S)` batch.
pub fn stack_glyphs(glyphs: &[&GlyphImage]) -> Result<Array4<f64>> {
    let first = glyphs.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (c, h, w) = first.pixels.dim();
    let mut x = Array4::zeros((glyphs.len(), c, h, w));
    for (i, g) in glyphs.iter().enumerate() {
        if g.pixels.dim() != (c, h, w) {
            return Err(Error::shape(format!("glyph `{}` is {:?}, batch expects {:?}", g.glyph_id, g.pixels.dim(), (c, h, w))));
        }
        x.slice_mut(s![i, .., .., ..]).assign(&g.pixels);
    }
    Ok(x)
}

impl HybridEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let cnn = ResNet::new(&mut init, &config.cnn_widths, &config.cnn_blocks);
        let spec = SwinSpec {
            input: config.input_size,
            patch: config.patch,
            dims: &config.swin_dims,
            depths: &config.swin_depths,
            heads: &config.swin_heads,
            window: config.window,
        };
        let swin = Swin::new(&mut init, &spec);
        let head = Head::new(&mut init, config.concat_dim(), config.fusion_hidden, config.embed_dim, config.bn_momentum, config.dropout);
        Ok(Self { config, seed, cnn, swin, head })
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (n, c, h, w) = x.dim();
        let s = self.config.input_size;
        if n == 0 || c != 3 || h != s || w != s {
            return Err(Error::shape(format!("encoder expects (N, 3, {s}, {s}), got {:?}", x.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input pixels"));
        }
        Ok(())
    }

    pub fn cnn_forward(&self, x: Array4<f64>, ctx: &Ctx) -> Result<(Array2<f64>, Option<ResNetCache>)> {
        self.check_input(&x)?;
        Ok(self.cnn.forward(x, ctx))
    }

    pub fn swin_forward(&self, x: Array4<f64>, ctx: &Ctx) -> Result<(Array2<f64>, Option<SwinCache>)> {
        self.check_input(&x)?;
        Ok(self.swin.forward(x, ctx))
    }

    pub fn fuse_project(&self, cnn: &Array2<f64>, swin: &Array2<f64>, ctx: &Ctx) -> Result<(Array2<f64>, Option<HeadCache>)> {
        if cnn.ncols() != self.config.cnn_out() || swin.ncols() != self.config.swin_out() || cnn.nrows() != swin.nrows() {
            return Err(Error::shape(format!(
                "fusion expects ({}, {}) features, got {:?} and {:?}",
                self.config.cnn_out(),
                self.config.swin_out(),
                cnn.dim(),
                swin.dim()
            )));
        }
        if cnn.iter().chain(swin.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite pathway features"));
        }
        let z = concatenate(Axis(1), &[cnn.view(), swin.view()]).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.head.forward(z, ctx))
    }

    pub fn forward(&self, x: Array4<f64>, ctx: &Ctx) -> Result<(Features, Option<EncoderCache>)> {
        self.check_input(&x)?;
        let (swin, sc) = self.swin.forward(x.clone(), ctx);
        let (cnn, cc) = self.cnn.forward(x, ctx);
        let (fused, hc) = self.fuse_project(&cnn, &swin, ctx)?;
        let cache = match (cc, sc, hc) {
            (Some(cnn), Some(swin), Some(head)) => Some(EncoderCache { cnn, swin, head }),
            _ => None,
        };
        Ok((Features { cnn, swin, fused }, cache))
    }

    /// Backpropagates `dfused` into every parameter.
    pub fn backward(&self, cache: &EncoderCache, dfused: Array2<f64>) -> Grads {
        let mut grads = Grads::new(self.param_count());
        let dz = self.head.backward(&cache.head, dfused, &mut grads);
        let k = self.config.cnn_out();
        self.cnn.backward(&cache.cnn, &dz.slice(s![.., ..k]).to_owned(), &mut grads);
        self.swin.backward(&cache.swin, &dz.slice(s![.., k..]).to_owned(), &mut grads);
        grads
    }

    /// Folds training-batch statistics into running BN estimates.
    pub fn absorb(&mut self, cache: &EncoderCache) {
        self.cnn.absorb(&cache.cnn);
        self.head.absorb(&cache.head);
    }

    /// Replaces the BN running statistics with their plain average over
    /// training-mode forwards of `glyphs`, `batch` at a time. Parameters are
    /// untouched; batches of one glyph are skipped.
    pub fn recalibrate_bn(&mut self, glyphs: &[&GlyphImage], batch: usize, seed: u64) -> Result<()> {
        let mut momenta = Vec::new();
        self.cnn.visit_bn_mut(&mut |bn| momenta.push(bn.momentum));
        self.head.visit_bn_mut(&mut |bn| momenta.push(bn.momentum));
        let mut k = 0usize;
        let mut outcome = Ok(());
        for (bi, chunk) in glyphs.chunks(batch.max(2)).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let x = match stack_glyphs(chunk) {
                Ok(x) => x,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            let cache = match self.forward(x, &Ctx::train(crate::rng::derive(seed, &[bi as u64]))) {
                Ok((_, c)) => c.expect("training forward records"),
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            };
            k += 1;
            let m = 1.0 / k as f64;
            self.cnn.visit_bn_mut(&mut |bn| bn.momentum = m);
            self.head.visit_bn_mut(&mut |bn| bn.momentum = m);
            self.absorb(&cache);
        }
        let mut it = momenta.into_iter();
        self.cnn.visit_bn_mut(&mut |bn| bn.momentum = it.next().expect("same layers"));
        self.head.visit_bn_mut(&mut |bn| bn.momentum = it.next().expect("same layers"));
        outcome
    }

    /// Inference-mode embeddings, `batch` glyphs at a time.
    pub fn embed(&self, glyphs: &[&GlyphImage], batch: usize) -> Result<Features> {
        let mut parts = Vec::new();
        for chunk in glyphs.chunks(batch.max(1)) {
            let x = stack_glyphs(chunk)?;
            parts.push(self.forward(x, &Ctx::eval())?.0);
        }
        let cat = |f: fn(&Features) -> &Array2<f64>| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
        };
        Ok(Features { cnn: cat(|p| &p.cnn)?, swin: cat(|p| &p.swin)?, fused: cat(|p| &p.fused)? })
    }
}

impl Module for HybridEncoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.cnn.visit(f);
        self.swin.visit(f);
        self.head.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.cnn.visit_mut(f);
        self.swin.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::check;
    use ndarray::Ix4;

    /// Smallest configuration that keeps every stage of both pathways.
    pub(crate) fn toy_config() -> EncoderConfig {
        EncoderConfig {
            preset: None,
            input_size: 64,
            cnn_widths: vec![4, 4, 8, 8],
            cnn_blocks: vec![1, 1, 1, 1],
            swin_dims: vec![4, 8, 16, 32],
            swin_depths: vec![2, 2, 2, 2],
            swin_heads: vec![1, 2, 2, 4],
            window: 2,
            patch: 4,
            fusion_hidden: 8,
            embed_dim: 8,
            bn_momentum: 0.01,
            dropout: 0.1,
        }
    }

    #[test]
    fn presets_are_valid_and_dims_add_up() {
        for cfg in [EncoderConfig::paper(), EncoderConfig::tiny(), toy_config()] {
            cfg.validate().unwrap();
        }
        assert_eq!(EncoderConfig::paper().concat_dim(), 1536);
        assert_eq!(EncoderConfig::tiny().cnn_out(), 64);
    }

    #[test]
    fn grid_errors() {
        let mut cfg = EncoderConfig::tiny();
        cfg.input_size = 230;
        assert!(cfg.validate().is_err());
        cfg.input_size = 200;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::tiny();
        cfg.swin_dims[2] = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_shapes_and_eval_determinism() {
        let enc = HybridEncoder::new(toy_config(), 3).unwrap();
        let x = check::random(&[2, 3, 64, 64], 1).into_dimensionality::<Ix4>().unwrap();
        let (f1, _) = enc.forward(x.clone(), &Ctx::eval()).unwrap();
        let (f2, _) = enc.forward(x, &Ctx::eval()).unwrap();
        assert_eq!((f1.cnn.ncols(), f1.swin.ncols(), f1.fused.ncols()), (8, 32, 8));
        assert_eq!(f1.fused, f2.fused);
        let bad = Array4::zeros((1, 3, 60, 64));
        assert!(matches!(enc.forward(bad, &Ctx::eval()), Err(Error::Shape(_))));
        let (a, b) = (Array2::zeros((1, 7)), Array2::zeros((1, 32)));
        assert!(matches!(enc.fuse_project(&a, &b, &Ctx::eval()), Err(Error::Shape(_))));
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let enc = HybridEncoder::new(toy_config(), 5).unwrap();
        let x = check::random(&[4, 3, 64, 64], 2).into_dimensionality::<Ix4>().unwrap();
        let (f, c) = enc.forward(x, &Ctx::train(1)).unwrap();
        let r = check::random(f.fused.shape(), 3).into_dimensionality().unwrap();
        let g = enc.backward(c.as_ref().unwrap(), r);
        enc.visit_params(&mut |p| {
            if p.trainable {
                let n = g.get(p.id).map(|g| g.iter().map(|v| v * v).sum::<f64>()).unwrap_or(0.0);
                assert!(n > 0.0, "no gradient reaches {}", p.name);
            }
        });
    }

    #[test]
    fn snapshot_restore_round_trip() {
        let mut enc = HybridEncoder::new(toy_config(), 5).unwrap();
        let snap = enc.snapshot();
        enc.visit_params_mut(&mut |p| p.value.fill(0.5));
        enc.restore(&snap);
        let other = HybridEncoder::new(toy_config(), 5).unwrap();
        assert_eq!(enc.snapshot(), other.snapshot());
    }

    #[test]
    fn bn_recalibration_averages_batch_statistics() {
        let mut cfg = toy_config();
        cfg.dropout = 0.0;
        let glyphs: Vec<GlyphImage> = (0..6)
            .map(|i| {
                let plane = ndarray::Array2::from_shape_fn((64, 64), |(y, x)| ((x * (i + 1) + 3 * y) % 17) as f64 / 17.0);
                GlyphImage::from_intensity(&plane, "s", format!("g{i}"))
            })
            .collect();
        let refs: Vec<&GlyphImage> = glyphs.iter().collect();
        let stats = |enc: &HybridEncoder| {
            let mut v = Vec::new();
            let mut enc = enc.clone();
            enc.cnn.visit_bn_mut(&mut |bn| v.push((bn.running_mean.value.clone(), bn.running_var.value.clone())));
            enc.head.visit_bn_mut(&mut |bn| v.push((bn.running_mean.value.clone(), bn.running_var.value.clone())));
            v
        };
        let base = HybridEncoder::new(cfg, 2).unwrap();
        let mut first = base.clone();
        first.recalibrate_bn(&refs[..3], 3, 0).unwrap();
        let mut second = base.clone();
        second.recalibrate_bn(&refs[3..], 3, 0).unwrap();
        let mut both = base.clone();
        both.recalibrate_bn(&refs, 3, 0).unwrap();
        for ((a, b), c) in stats(&first).iter().zip(stats(&second)).zip(stats(&both)) {
            let mean = (&a.0 + &b.0) / 2.0;
            let var = (&a.1 + &b.1) / 2.0;
            assert!((&mean - &c.0).iter().all(|d| d.abs() < 1e-12));
            assert!((&var - &c.1).iter().all(|d| d.abs() < 1e-12));
        }
        let mut momenta = Vec::new();
        both.head.visit_bn_mut(&mut |bn| momenta.push(bn.momentum));
        assert_eq!(momenta, vec![0.01, 0.01]);
        assert_eq!(stats(&first).len(), stats(&base).len());
        assert_ne!(stats(&first)[0], stats(&base)[0]);
    }
}
