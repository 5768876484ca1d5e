//! Label-preserving glyph perturbations and the positive-pair generator.
//!
//! Every transform runs on the intensity plane (ink dark, background
//! light). Standardised glyphs are denormalised, perturbed and normalised
//! again; raw rasters are perturbed channel by channel. No transform flips
//! or crops, so stroke topology is kept.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_intensity, GlyphImage, ScriptCorpus};
use crate::raster;
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Rotate,
    Scale,
    Translate,
    Shear,
    Elastic,
    Brightness,
    Contrast,
    Sharpness,
    Blur,
    Noise,
    Speckle,
    Texture,
    Jitter,
}

/// Sampling ranges for every transform plus the list of combos one of
/// which is drawn uniformly per call. Ranges are inclusive `(lo, hi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    /// Positive is counter-clockwise as displayed.
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Fraction of the raster side, per axis.
    pub translate_frac: (f64, f64),
    pub shear_deg: (f64, f64),
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub sharpness: (f64, f64),
    pub blur_radius: (f64, f64),
    /// Additive uniform noise amplitude, as a fraction of the dynamic range.
    pub noise_amplitude: f64,
    /// Standard deviation of multiplicative speckle.
    pub speckle_sigma: f64,
    pub background_texture: bool,
    pub texture_amplitude: f64,
    pub jitter: bool,
    /// Gamma range used by background jitter.
    pub jitter_gamma: (f64, f64),
    pub combos: Vec<Vec<AugOp>>,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        use AugOp::*;
        Self {
            rotation_deg: (-45.0, 45.0),
            scale: (0.85, 1.15),
            translate_frac: (-0.10, 0.10),
            shear_deg: (-10.0, 10.0),
            elastic_alpha: 34.0,
            elastic_sigma: 4.0,
            brightness: (0.7, 1.5),
            contrast: (0.7, 1.5),
            sharpness: (0.7, 1.6),
            blur_radius: (0.5, 1.2),
            noise_amplitude: 0.05,
            speckle_sigma: 0.05,
            background_texture: true,
            texture_amplitude: 0.06,
            jitter: true,
            jitter_gamma: (0.8, 1.25),
            combos: vec![
                vec![Rotate, Brightness, Noise],
                vec![Elastic, Contrast],
                vec![Rotate, Scale, Translate, Blur],
                vec![Shear, Sharpness, Speckle],
                vec![Scale, Translate, Contrast, Texture],
                vec![Rotate, Elastic, Brightness, Jitter],
            ],
        }
    }
}

impl AugmentationPolicy {
    /// Every range collapsed to its neutral value; `augment` returns the
    /// input unchanged.
    pub fn identity() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            translate_frac: (0.0, 0.0),
            shear_deg: (0.0, 0.0),
            elastic_alpha: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            sharpness: (1.0, 1.0),
            blur_radius: (0.0, 0.0),
            noise_amplitude: 0.0,
            speckle_sigma: 0.0,
            background_texture: false,
            jitter: false,
            jitter_gamma: (1.0, 1.0),
            ..Self::default()
        }
    }

    /// Policy applying exactly `ops` with this policy's ranges.
    pub fn only(mut self, ops: &[AugOp]) -> Self {
        self.combos = vec![ops.to_vec()];
        self
    }
}

/// One concrete draw from a policy. `None` means the transform is not part
/// of the drawn combo. Seeds drive the stochastic fields.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AugmentParams {
    pub combo: usize,
    pub rotation_deg: Option<f64>,
    pub scale: Option<f64>,
    pub translate_frac: Option<(f64, f64)>,
    pub shear_deg: Option<f64>,
    pub elastic: Option<(f64, f64, u64)>,
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub sharpness: Option<f64>,
    pub blur_radius: Option<f64>,
    pub noise: Option<(f64, u64)>,
    pub speckle: Option<(f64, u64)>,
    pub texture: Option<(f64, u64)>,
    pub jitter_gamma: Option<f64>,
}

fn draw(r: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = r.random();
    lo + (hi - lo) * u
}

/// Draws a combo and its parameters.
pub fn sample_params(policy: &AugmentationPolicy, r: &mut Rng) -> AugmentParams {
    let mut p = AugmentParams::default();
    if policy.combos.is_empty() {
        return p;
    }
    p.combo = r.random_range(0..policy.combos.len());
    for op in &policy.combos[p.combo] {
        match op {
            AugOp::Rotate => p.rotation_deg = Some(draw(r, policy.rotation_deg)),
            AugOp::Scale => p.scale = Some(draw(r, policy.scale)),
            AugOp::Translate => {
                p.translate_frac = Some((draw(r, policy.translate_frac), draw(r, policy.translate_frac)))
            }
            AugOp::Shear => p.shear_deg = Some(draw(r, policy.shear_deg)),
            AugOp::Elastic => p.elastic = Some((policy.elastic_alpha, policy.elastic_sigma, r.random())),
            AugOp::Brightness => p.brightness = Some(draw(r, policy.brightness)),
            AugOp::Contrast => p.contrast = Some(draw(r, policy.contrast)),
            AugOp::Sharpness => p.sharpness = Some(draw(r, policy.sharpness)),
            AugOp::Blur => p.blur_radius = Some(draw(r, policy.blur_radius)),
            AugOp::Noise => p.noise = Some((policy.noise_amplitude, r.random())),
            AugOp::Speckle => p.speckle = Some((policy.speckle_sigma, r.random())),
            AugOp::Texture if policy.background_texture => {
                p.texture = Some((policy.texture_amplitude, r.random()))
            }
            AugOp::Jitter if policy.jitter => p.jitter_gamma = Some(draw(r, policy.jitter_gamma)),
            AugOp::Texture | AugOp::Jitter => {}
        }
    }
    p
}

fn affine_forward(p: &AugmentParams) -> Option<([[f64; 2]; 2], [f64; 2])> {
    let theta = p.rotation_deg.unwrap_or(0.0).to_radians();
    let s = p.scale.unwrap_or(1.0);
    let sh = p.shear_deg.unwrap_or(0.0).to_radians().tan();
    let (tx, ty) = p.translate_frac.unwrap_or((0.0, 0.0));
    if theta == 0.0 && s == 1.0 && sh == 0.0 && tx == 0.0 && ty == 0.0 {
        return None;
    }
    // Image coordinates have y pointing down, so a visually counter-clockwise
    // rotation maps (1, 0) to (0, -1).
    let (sin, cos) = theta.sin_cos();
    let rot = [[cos, sin], [-sin, cos]];
    let shear = [[1.0, sh], [0.0, 1.0]];
    let mut a = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] = s * (rot[i][0] * shear[0][j] + rot[i][1] * shear[1][j]);
        }
    }
    Some((a, [tx, ty]))
}

fn warp(img: ArrayView2<'_, f64>, a: [[f64; 2]; 2], t_frac: [f64; 2], fill: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let t = [t_frac[0] * w as f64, t_frac[1] * h as f64];
    // source = inv * (dest - c - t) + c
    let back = [
        -(inv[0][0] * t[0] + inv[0][1] * t[1]),
        -(inv[1][0] * t[0] + inv[1][1] * t[1]),
    ];
    raster::warp_affine(img, inv, back, fill)
}

fn noise_field(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_simple_fn(shape, || r.random::<f64>() * 2.0 - 1.0)
}

fn elastic(img: ArrayView2<'_, f64>, alpha: f64, sigma: f64, seed: u64, fill: f64) -> Array2<f64> {
    let shape = img.dim();
    let dx = raster::gaussian_blur(noise_field(shape, seed).view(), sigma) * alpha;
    let dy = raster::gaussian_blur(noise_field(shape, seed ^ 0x9E37_79B9).view(), sigma) * alpha;
    Array2::from_shape_fn(shape, |(y, x)| {
        raster::sample_bilinear(img, y as f64 + dy[[y, x]], x as f64 + dx[[y, x]], fill)
    })
}

fn smooth3(img: ArrayView2<'_, f64>) -> Array2<f64> {
    // 3x3 smoothing kernel with a heavy centre, as used for sharpness blending.
    let k = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    let (h, w) = img.dim();
    let mut out = img.to_owned();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let mut acc = 0.0;
            for (dy, row) in k.iter().enumerate() {
                for (dx, kv) in row.iter().enumerate() {
                    acc += kv * img[[y + dy - 1, x + dx - 1]];
                }
            }
            out[[y, x]] = acc / 13.0;
        }
    }
    out
}

/// Applies drawn parameters to one intensity plane. Returns `None` when
/// every transform is neutral.
pub fn apply_plane(img: ArrayView2<'_, f64>, p: &AugmentParams) -> Option<Array2<f64>> {
    let fill = raster::border_mean(img);
    let mut cur: Option<Array2<f64>> = None;
    let step = |f: &dyn Fn(ArrayView2<'_, f64>) -> Array2<f64>, cur: &mut Option<Array2<f64>>| {
        let next = match cur {
            Some(c) => f(c.view()),
            None => f(img),
        };
        *cur = Some(next);
    };

    if let Some((a, t)) = affine_forward(p) {
        step(&|v| warp(v, a, t, fill), &mut cur);
    }
    if let Some((alpha, sigma, seed)) = p.elastic {
        if alpha != 0.0 {
            step(&|v| elastic(v, alpha, sigma, seed, fill), &mut cur);
        }
    }
    if let Some(b) = p.brightness.filter(|&b| b != 1.0) {
        step(&|v| v.mapv(|x| x * b), &mut cur);
    }
    if let Some(c) = p.contrast.filter(|&c| c != 1.0) {
        step(
            &|v| {
                let m = v.mean().unwrap_or(0.0);
                v.mapv(|x| m + c * (x - m))
            },
            &mut cur,
        );
    }
    if let Some(s) = p.sharpness.filter(|&s| s != 1.0) {
        step(
            &|v| {
                let sm = smooth3(v);
                &sm + &((&v - &sm) * s)
            },
            &mut cur,
        );
    }
    if let Some(r) = p.blur_radius.filter(|&r| r > 0.0) {
        step(&|v| raster::gaussian_blur(v, r), &mut cur);
    }
    if let Some((amp, seed)) = p.noise.filter(|n| n.0 > 0.0) {
        step(&|v| &v + &(noise_field(v.dim(), seed) * amp), &mut cur);
    }
    if let Some((sigma, seed)) = p.speckle.filter(|n| n.0 > 0.0) {
        step(
            &|v| {
                let mut r = rng::seeded(seed);
                let n = Normal::new(0.0, sigma).expect("finite sigma");
                v.mapv(|x| x * (1.0 + n.sample(&mut r)))
            },
            &mut cur,
        );
    }
    if let Some((amp, seed)) = p.texture.filter(|t| t.0 > 0.0) {
        step(
            &|v| {
                let field = raster::gaussian_blur(noise_field(v.dim(), seed).view(), 6.0);
                let peak = field.iter().fold(1e-12f64, |m, x| m.max(x.abs()));
                // Texture darkens the light background more than the ink.
                ndarray::Zip::from(&v).and(&field).map_collect(|&x, &f| x - amp * x * (0.5 + 0.5 * f / peak))
            },
            &mut cur,
        );
    }
    if let Some(g) = p.jitter_gamma.filter(|&g| g != 1.0) {
        step(&|v| v.mapv(|x| x.clamp(0.0, 1.0).powf(g)), &mut cur);
    }
    cur.map(|c| c.mapv(|x| if x.is_finite() { x.clamp(0.0, 1.0) } else { 1.0 }))
}

/// Applies drawn parameters to a glyph. Neutral draws return a pixel-equal
/// copy.
pub fn apply(g: &GlyphImage, p: &AugmentParams) -> GlyphImage {
    let mut out = g.clone();
    if g.normalized {
        if let Some(plane) = apply_plane(g.intensity().view(), p) {
            out.pixels = normalize_intensity(plane.view());
        }
    } else {
        let planes: Vec<Option<Array2<f64>>> =
            g.pixels.axis_iter(Axis(0)).map(|c| apply_plane(c, p)).collect();
        if planes.iter().any(Option::is_some) {
            let (c, h, w) = g.pixels.dim();
            let mut px = Array3::zeros((c, h, w));
            for (i, pl) in planes.into_iter().enumerate() {
                match pl {
                    Some(pl) => px.index_axis_mut(Axis(0), i).assign(&pl),
                    None => px.index_axis_mut(Axis(0), i).assign(&g.pixels.index_axis(Axis(0), i)),
                }
            }
            out.pixels = px;
        }
    }
    out
}

/// Applies one combo drawn from `policy`.
pub fn augment_glyph(g: &GlyphImage, policy: &AugmentationPolicy, r: &mut Rng) -> GlyphImage {
    let p = sample_params(policy, r);
    apply(g, &p)
}

/// Appends `k` augmented copies of every glyph; originals come first and
/// copies carry `#aug<i>` suffixes.
pub fn expand(corpus: &ScriptCorpus, k: usize, policy: &AugmentationPolicy, seed: u64) -> ScriptCorpus {
    let mut out = corpus.clone();
    out.splits = corpus.splits.as_ref().map(|s| {
        let mut all = s.clone();
        for _ in 0..k {
            all.extend_from_slice(s);
        }
        all
    });
    for i in 0..k {
        let copies = crate::par::map_range(corpus.len(), |gi| {
            let g = &corpus.glyphs[gi];
            let mut r = rng::stream(seed, &[rng::label("expand"), rng::label(&g.glyph_id), i as u64]);
            let mut a = augment_glyph(g, policy, &mut r);
            a.glyph_id = format!("{}#aug{i}", g.glyph_id);
            a
        });
        out.glyphs.extend(copies);
    }
    out
}

/// Two independent augmentations of the same glyph.
pub fn positive_pair(g: &GlyphImage, policy: &AugmentationPolicy, r: &mut Rng) -> (GlyphImage, GlyphImage) {
    let sa: u64 = r.random();
    let sb: u64 = r.random();
    (
        augment_glyph(g, policy, &mut rng::seeded(sa)),
        augment_glyph(g, policy, &mut rng::seeded(sb)),
    )
}
