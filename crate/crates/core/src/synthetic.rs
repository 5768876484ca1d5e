//! Synthetic script families rendered from a small stroke grammar.
//!
//! Every family owns an inventory of motifs (short groups of curved
//! strokes at fixed positions in the glyph box). A glyph is the union of a
//! few motifs from its family's inventory drawn with slight jitter. A
//! family may copy a fraction of another family's motifs, which makes the
//! two visually closer by construction.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, GlyphImage, ManifestEntry, Role, ScriptCorpus};
use crate::raster;
use crate::rng;
use crate::{Error, Result};

const PAPER: f64 = 0.92;
const INK: f64 = 0.08;

fn default_strokes() -> (usize, usize) {
    (2, 4)
}
fn default_angles() -> Vec<f64> {
    vec![0.0, 45.0, 90.0, 135.0]
}
fn default_curvature() -> f64 {
    0.3
}
fn default_pool() -> usize {
    10
}
fn default_size() -> usize {
    96
}
fn default_stroke_width() -> f64 {
    0.045
}
fn default_role() -> Role {
    Role::Comparison
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScriptSpec {
    pub family: String,
    #[serde(default = "default_role")]
    pub role: Role,
    pub glyph_count: usize,
    /// Inclusive range of motifs per glyph.
    #[serde(default = "default_strokes")]
    pub strokes: (usize, usize),
    /// Stroke directions in degrees.
    #[serde(default = "default_angles")]
    pub angles: Vec<f64>,
    /// Largest bend of a stroke relative to its length.
    #[serde(default = "default_curvature")]
    pub curvature: f64,
    /// Size of the family's motif inventory.
    #[serde(default = "default_pool")]
    pub motif_pool: usize,
    /// Family whose motifs are partly copied; must appear earlier in the list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub share_with: Option<String>,
    #[serde(default)]
    pub shared_motif_fraction: f64,
    /// Side of the rendered square raster in pixels.
    #[serde(default = "default_size")]
    pub size: usize,
    /// Pen width as a fraction of the raster side.
    #[serde(default = "default_stroke_width")]
    pub stroke_width: f64,
}

impl SyntheticScriptSpec {
    pub fn new(family: impl Into<String>, glyph_count: usize) -> Self {
        Self {
            family: family.into(),
            role: default_role(),
            glyph_count,
            strokes: default_strokes(),
            angles: default_angles(),
            curvature: default_curvature(),
            motif_pool: default_pool(),
            share_with: None,
            shared_motif_fraction: 0.0,
            size: default_size(),
            stroke_width: default_stroke_width(),
        }
    }

    pub fn sharing(mut self, base: impl Into<String>, fraction: f64) -> Self {
        self.share_with = Some(base.into());
        self.shared_motif_fraction = fraction;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic family `{}`: {m}", self.family)));
        if self.family.is_empty() || self.family.contains(['/', '\\']) {
            return bad("family id must be a non-empty plain name".into());
        }
        if !(0.0..=1.0).contains(&self.shared_motif_fraction) {
            return bad(format!("shared_motif_fraction {} outside [0, 1]", self.shared_motif_fraction));
        }
        if self.shared_motif_fraction > 0.0 && self.share_with.is_none() {
            return bad("shared_motif_fraction set without share_with".into());
        }
        let (lo, hi) = self.strokes;
        if lo == 0 || lo > hi || hi > self.motif_pool {
            return bad(format!("stroke range {lo}..={hi} invalid for a pool of {}", self.motif_pool));
        }
        if self.angles.is_empty() || self.angles.iter().any(|a| !a.is_finite()) {
            return bad("angle set must be non-empty and finite".into());
        }
        if !(0.0..=1.0).contains(&self.curvature) {
            return bad(format!("curvature {} outside [0, 1]", self.curvature));
        }
        if !(0.005..=0.25).contains(&self.stroke_width) {
            return bad(format!("stroke width {} outside [0.005, 0.25]", self.stroke_width));
        }
        if self.size < 16 {
            return bad(format!("raster size {} below 16", self.size));
        }
        Ok(())
    }
}

/// The three-family fixture: B copies most of A's six motifs; C shares none
/// and draws bolder, more curved strokes at the in-between angles.
pub fn default_fixture(glyph_count: usize) -> Vec<SyntheticScriptSpec> {
    let base = |family: &str| {
        let mut s = SyntheticScriptSpec::new(family, glyph_count);
        s.motif_pool = 6;
        s.strokes = (3, 5);
        s
    };
    let mut a = base("A");
    a.role = Role::Target;
    let b = base("B").sharing("A", 0.8);
    let mut c = base("C").sharing("A", 0.0);
    c.angles = vec![22.5, 67.5, 112.5, 157.5];
    c.curvature = 0.8;
    c.stroke_width = 0.1;
    vec![a, b, c]
}

/// Quadratic curve in unit glyph coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    pub from: [f64; 2],
    pub to: [f64; 2],
    /// Control-point offset along the normal, relative to the chord length.
    pub bend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Motif {
    pub strokes: Vec<Stroke>,
}

fn random_motif(spec: &SyntheticScriptSpec, r: &mut rng::Rng) -> Motif {
    let anchor = [r.random_range(0.25..0.75), r.random_range(0.25..0.75)];
    let n = r.random_range(1..=2);
    let strokes = (0..n)
        .map(|_| {
            let a = spec.angles[r.random_range(0..spec.angles.len())].to_radians() + r.random_range(-0.1..0.1);
            let len = r.random_range(0.25..0.5);
            let off = [r.random_range(-0.08..0.08), r.random_range(-0.08..0.08)];
            let c = [anchor[0] + off[0], anchor[1] + off[1]];
            let d = [a.cos() * len / 2.0, -a.sin() * len / 2.0];
            let clamp = |v: f64| v.clamp(0.08, 0.92);
            Stroke {
                from: [clamp(c[0] - d[0]), clamp(c[1] - d[1])],
                to: [clamp(c[0] + d[0]), clamp(c[1] + d[1])],
                bend: r.random_range(-spec.curvature..=spec.curvature),
            }
        })
        .collect();
    Motif { strokes }
}

/// Builds each family's motif inventory, resolving `share_with` in order.
pub fn motif_pools(specs: &[SyntheticScriptSpec], seed: u64) -> Result<BTreeMap<String, Vec<Motif>>> {
    let mut pools: BTreeMap<String, Vec<Motif>> = BTreeMap::new();
    for spec in specs {
        spec.validate()?;
        if pools.contains_key(&spec.family) {
            return Err(Error::Config(format!("synthetic family `{}` listed twice", spec.family)));
        }
        let mut r = rng::stream(seed, &[rng::label("motifs"), rng::label(&spec.family)]);
        let mut pool = Vec::with_capacity(spec.motif_pool);
        if let Some(base) = &spec.share_with {
            let base_pool = pools.get(base).ok_or_else(|| {
                Error::Config(format!("family `{}` shares with `{base}`, which must be listed before it", spec.family))
            })?;
            let k = ((spec.shared_motif_fraction * spec.motif_pool as f64).round() as usize).min(base_pool.len());
            pool.extend(base_pool.iter().take(k).cloned());
        }
        while pool.len() < spec.motif_pool {
            pool.push(random_motif(spec, &mut r));
        }
        pools.insert(spec.family.clone(), pool);
    }
    Ok(pools)
}

fn draw_stroke(canvas: &mut Array2<f64>, s: &Stroke, shift: [f64; 2], width: f64) {
    let n = canvas.nrows() as f64;
    let p = |q: [f64; 2]| [(q[0] + shift[0]) * n, (q[1] + shift[1]) * n];
    let (a, b) = (p(s.from), p(s.to));
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let ctrl = [(a[0] + b[0]) / 2.0 - dy * s.bend, (a[1] + b[1]) / 2.0 + dx * s.bend];
    let segs = 16;
    let pts: Vec<[f64; 2]> = (0..=segs)
        .map(|i| {
            let t = i as f64 / segs as f64;
            let u = 1.0 - t;
            [
                u * u * a[0] + 2.0 * u * t * ctrl[0] + t * t * b[0],
                u * u * a[1] + 2.0 * u * t * ctrl[1] + t * t * b[1],
            ]
        })
        .collect();
    let half = width / 2.0;
    let (h, w) = canvas.dim();
    for seg in pts.windows(2) {
        let (p0, p1) = (seg[0], seg[1]);
        let x0 = (p0[0].min(p1[0]) - half - 1.0).floor().max(0.0) as usize;
        let x1 = ((p0[0].max(p1[0]) + half + 1.0).ceil() as usize).min(w);
        let y0 = (p0[1].min(p1[1]) - half - 1.0).floor().max(0.0) as usize;
        let y1 = ((p0[1].max(p1[1]) + half + 1.0).ceil() as usize).min(h);
        let (vx, vy) = (p1[0] - p0[0], p1[1] - p0[1]);
        let vv = (vx * vx + vy * vy).max(1e-12);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = (((px - p0[0]) * vx + (py - p0[1]) * vy) / vv).clamp(0.0, 1.0);
                let d = ((px - p0[0] - t * vx).powi(2) + (py - p0[1] - t * vy).powi(2)).sqrt();
                let cover = (half + 0.5 - d).clamp(0.0, 1.0);
                let v = &mut canvas[[y, x]];
                *v = v.min(PAPER - (PAPER - INK) * cover);
            }
        }
    }
}

/// Renders one glyph as an intensity plane (dark ink on light paper).
pub fn render(motifs: &[&Motif], size: usize, stroke_width: f64, shift: &[[f64; 2]]) -> Array2<f64> {
    let mut canvas = Array2::from_elem((size, size), PAPER);
    let width = (size as f64 * stroke_width).max(1.5);
    for (m, s) in motifs.iter().zip(shift.iter().chain(std::iter::repeat(&[0.0, 0.0]))) {
        for st in &m.strokes {
            draw_stroke(&mut canvas, st, *s, width);
        }
    }
    canvas
}

/// A rendered glyph with the inventory indices it was built from.
#[derive(Debug, Clone)]
pub struct SyntheticGlyph {
    pub id: String,
    pub motifs: Vec<usize>,
    pub plane: Array2<f64>,
}

/// Renders every family in memory.
pub fn synthesize(specs: &[SyntheticScriptSpec], seed: u64) -> Result<BTreeMap<String, Vec<SyntheticGlyph>>> {
    let pools = motif_pools(specs, seed)?;
    let jitter = Normal::new(0.0, 0.015).expect("valid sd");
    let mut out = BTreeMap::new();
    for spec in specs {
        let pool = &pools[&spec.family];
        let mut r = rng::stream(seed, &[rng::label("glyphs"), rng::label(&spec.family)]);
        let glyphs = (0..spec.glyph_count)
            .map(|i| {
                let k = r.random_range(spec.strokes.0..=spec.strokes.1);
                let mut idx = sample(&mut r, pool.len(), k).into_vec();
                idx.sort_unstable();
                let chosen: Vec<&Motif> = idx.iter().map(|&j| &pool[j]).collect();
                let shift: Vec<[f64; 2]> = idx.iter().map(|_| [jitter.sample(&mut r), jitter.sample(&mut r)]).collect();
                SyntheticGlyph {
                    id: format!("{}_{i:04}", spec.family),
                    motifs: idx,
                    plane: render(&chosen, spec.size, spec.stroke_width, &shift),
                }
            })
            .collect();
        out.insert(spec.family.clone(), glyphs);
    }
    Ok(out)
}

/// Standardised in-memory corpora, one per family.
pub fn synthetic_corpora(specs: &[SyntheticScriptSpec], seed: u64, input_size: usize) -> Result<Vec<ScriptCorpus>> {
    let rendered = synthesize(specs, seed)?;
    specs
        .iter()
        .map(|spec| {
            let glyphs = rendered[&spec.family]
                .iter()
                .map(|g| {
                    let plane = raster::resize(g.plane.view(), input_size, input_size);
                    GlyphImage::from_intensity(&plane, spec.family.clone(), format!("{}.png", g.id))
                })
                .collect();
            Ok(ScriptCorpus::new(spec.family.clone(), spec.role, glyphs))
        })
        .collect()
}

/// Writes `<out>/<family>/<id>.png` for every glyph plus `<out>/manifest.toml`
/// and `<out>/synthetic.json` (the specs, seed and motif inventories).
pub fn generate_synthetic(specs: &[SyntheticScriptSpec], seed: u64, out: &Path) -> Result<CorpusManifest> {
    let rendered = synthesize(specs, seed)?;
    let mut manifest = CorpusManifest::default();
    for spec in specs {
        let dir = out.join(&spec.family);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for g in &rendered[&spec.family] {
            let path = dir.join(format!("{}.png", g.id));
            raster::to_luma8(g.plane.view()).save(&path).map_err(|source| Error::Image { path: path.clone(), source })?;
        }
        manifest.entries.push(ManifestEntry {
            name: spec.family.clone(),
            role: spec.role,
            dir: Some(spec.family.clone().into()),
            denoise: false,
            composite: None,
            size: None,
            source_only: false,
        });
    }
    let path = out.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()?).map_err(|e| Error::io(&path, e))?;
    let info = serde_json::json!({
        "seed": seed,
        "specs": specs,
        "motifs": motif_pools(specs, seed)?,
    });
    let path = out.join("synthetic.json");
    std::fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Ink mask of an intensity plane.
pub fn ink_mask(plane: &Array2<f64>) -> Array2<bool> {
    plane.mapv(|v| v < (PAPER + INK) / 2.0)
}

/// Intersection over union of two masks; 1 for two empty masks.
pub fn pixel_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean pixel IoU over all cross pairs of two glyph sets.
pub fn mean_pixel_iou(a: &[Array2<bool>], b: &[Array2<bool>]) -> f64 {
    let mut sum = 0.0;
    for x in a {
        for y in b {
            sum += pixel_iou(x, y);
        }
    }
    sum / (a.len() * b.len()).max(1) as f64
}
