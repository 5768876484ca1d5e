//! Glyph corpora: loading image directories, preprocessing to the encoder
//! input contract, balanced composites and train/val/test splits.

mod denoise;
mod manifest;
mod preprocess;
mod store;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use denoise::{adaptive_threshold, close_2x2, denoise_manuscript, non_local_means, DenoiseConfig};
pub use manifest::{CompositePart, CorpusManifest, ManifestEntry};
pub use preprocess::{
    denormalize, normalize_intensity, square_pad, square_pad_gray, standardize, INPUT_SIZE,
    NORM_MEAN, NORM_STD,
};
pub use store::{load_prepared, save_prepared};

use crate::augment::{self, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::{par, raster, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Target,
    Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// One glyph raster with its labels.
///
/// After standardisation `pixels` is `3 x 224 x 224`, normalised per
/// channel, and `normalized` is set; re-standardising such a glyph is an
/// error.
#[derive(Debug, Clone)]
pub struct GlyphImage {
    pub pixels: Array3<f64>,
    pub script: String,
    pub glyph_id: String,
    pub provenance: String,
    pub normalized: bool,
}

impl GlyphImage {
    /// Wraps a raw `(C, H, W)` raster with values in `[0, 1]`.
    pub fn raw(pixels: Array3<f64>, script: impl Into<String>, glyph_id: impl Into<String>) -> Self {
        Self {
            pixels,
            script: script.into(),
            glyph_id: glyph_id.into(),
            provenance: String::new(),
            normalized: false,
        }
    }

    /// Builds a standardised glyph from a square intensity plane already at
    /// input resolution.
    pub fn from_intensity(gray: &Array2<f64>, script: impl Into<String>, glyph_id: impl Into<String>) -> Self {
        Self {
            pixels: normalize_intensity(gray.view()),
            script: script.into(),
            glyph_id: glyph_id.into(),
            provenance: String::new(),
            normalized: true,
        }
    }

    /// Pads and standardises in place. Fails if already normalised.
    pub fn standardize(&mut self) -> Result<()> {
        if self.normalized {
            return Err(Error::invalid(format!(
                "glyph `{}` is already normalised; refusing to normalise twice",
                self.glyph_id
            )));
        }
        let padded = square_pad(&self.pixels)?;
        self.pixels = standardize(&padded, INPUT_SIZE)?;
        self.normalized = true;
        Ok(())
    }

    /// Intensity plane in `[0, 1]` (undoes normalisation when set).
    pub fn intensity(&self) -> Array2<f64> {
        if self.normalized {
            denormalize(&self.pixels)
        } else {
            raster::to_gray(&self.pixels)
        }
    }
}

/// Named collection of glyphs with a role and optional split labels.
#[derive(Debug, Clone)]
pub struct ScriptCorpus {
    pub name: String,
    pub role: Role,
    pub glyphs: Vec<GlyphImage>,
    /// Parallel to `glyphs` when present.
    pub splits: Option<Vec<SplitLabel>>,
}

impl ScriptCorpus {
    pub fn new(name: impl Into<String>, role: Role, glyphs: Vec<GlyphImage>) -> Self {
        Self {
            name: name.into(),
            role,
            glyphs,
            splits: None,
        }
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    /// Glyphs carrying `label`; all glyphs when the corpus is unsplit.
    pub fn subset(&self, label: SplitLabel) -> Vec<&GlyphImage> {
        match &self.splits {
            Some(s) => self
                .glyphs
                .iter()
                .zip(s)
                .filter(|(_, l)| **l == label)
                .map(|(g, _)| g)
                .collect(),
            None => self.glyphs.iter().collect(),
        }
    }

    /// Checks id uniqueness and that split labels cover every glyph.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for g in &self.glyphs {
            if !ids.insert(g.glyph_id.as_str()) {
                return Err(Error::invalid(format!(
                    "corpus `{}`: duplicate glyph id `{}`",
                    self.name, g.glyph_id
                )));
            }
        }
        if let Some(s) = &self.splits {
            if s.len() != self.glyphs.len() {
                return Err(Error::invalid(format!(
                    "corpus `{}`: {} split labels for {} glyphs",
                    self.name,
                    s.len(),
                    self.glyphs.len()
                )));
            }
        }
        Ok(())
    }
}

/// Integer apportionment of `total` by `weights` (Hamilton / largest
/// remainder). Ties in the fractional part go to the earlier index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || sum <= 0.0 {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Preprocessing steps applied to each image file, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Grayscale,
    Denoise,
    SquarePad,
    Standardize,
}

/// Where denoising sits relative to square padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseStage {
    /// On the raw scan, before padding.
    #[default]
    BeforePad,
    AfterPad,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub denoise: DenoiseConfig,
    pub denoise_stage: DenoiseStage,
}

impl PreprocessConfig {
    pub fn steps(&self, denoise: bool) -> Vec<Step> {
        let mut steps = vec![Step::Grayscale];
        match (denoise, self.denoise_stage) {
            (true, DenoiseStage::BeforePad) => steps.extend([Step::Denoise, Step::SquarePad]),
            (true, DenoiseStage::AfterPad) => steps.extend([Step::SquarePad, Step::Denoise]),
            (false, _) => steps.push(Step::SquarePad),
        }
        steps.push(Step::Standardize);
        steps
    }
}

/// Runs the preprocessing chain on a raw `(C, H, W)` raster, reporting each
/// step to `observe` before it is applied.
pub fn preprocess(
    raw: &Array3<f64>,
    denoise: bool,
    cfg: &PreprocessConfig,
    observe: &mut dyn FnMut(Step),
) -> Result<Array3<f64>> {
    let mut gray = raw.clone();
    for step in cfg.steps(denoise) {
        observe(step);
        gray = match step {
            Step::Grayscale => raster::to_gray(&gray).insert_axis(ndarray::Axis(0)),
            Step::Denoise => {
                let plane = gray.index_axis(ndarray::Axis(0), 0);
                denoise_manuscript(plane, &cfg.denoise).insert_axis(ndarray::Axis(0))
            }
            Step::SquarePad => square_pad(&gray)?,
            Step::Standardize => standardize(&gray, INPUT_SIZE)?,
        };
    }
    Ok(gray)
}

/// Files skipped while loading a directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LoadReport {
    pub corpus: String,
    pub loaded: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

impl LoadReport {
    /// Plain-text log, one skipped file per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("corpus {}: loaded {}, skipped {}\n", self.corpus, self.loaded, self.skipped.len());
        for (p, why) in &self.skipped {
            s.push_str(&format!("skip {}: {}\n", p.display(), why));
        }
        s
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Loads every png/jpg in `dir` (sorted by file name) through the
/// preprocessing chain. Unreadable files are skipped and reported.
pub fn load_dir(
    dir: &Path,
    name: &str,
    role: Role,
    denoise: bool,
    cfg: &PreprocessConfig,
) -> Result<(ScriptCorpus, LoadReport)> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::invalid(format!("{}: no png/jpg images", dir.display())));
    }

    let results = par::map_slice(&files, |path| -> std::result::Result<GlyphImage, String> {
        let img = image::open(path).map_err(|e| e.to_string())?;
        let raw = raster::from_dynamic(&img);
        let pixels = preprocess(&raw, denoise, cfg, &mut |_| {}).map_err(|e| e.to_string())?;
        let id = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(GlyphImage {
            pixels,
            script: name.to_string(),
            glyph_id: id,
            provenance: path.display().to_string(),
            normalized: true,
        })
    });

    let mut report = LoadReport {
        corpus: name.to_string(),
        ..Default::default()
    };
    let mut glyphs = Vec::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok(g) => glyphs.push(g),
            Err(why) => {
                log::warn!("skipping {}: {why}", path.display());
                report.skipped.push((path.clone(), why));
            }
        }
    }
    report.loaded = glyphs.len();
    if glyphs.is_empty() {
        return Err(Error::invalid(format!("{}: every image failed to load", dir.display())));
    }
    Ok((ScriptCorpus::new(name, role, glyphs), report))
}

/// Loads one directory-backed manifest entry.
pub fn load_corpus(
    manifest: &CorpusManifest,
    entry: &ManifestEntry,
    cfg: &PreprocessConfig,
) -> Result<(ScriptCorpus, LoadReport)> {
    let dir = manifest
        .dir_of(entry)
        .ok_or_else(|| Error::Config(format!("entry `{}` has no directory", entry.name)))?;
    load_dir(&dir, &entry.name, entry.role, entry.denoise, cfg)
}

/// Builds a corpus of `size` glyphs drawing `round(proportion * size)` from
/// each source (largest-remainder rounding). Sources smaller than their
/// quota contribute every original plus augmented duplicates.
pub fn build_composite(
    name: &str,
    role: Role,
    sources: &[(&ScriptCorpus, f64)],
    size: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<ScriptCorpus> {
    if sources.is_empty() {
        return Err(Error::invalid("composite needs at least one source"));
    }
    let total: f64 = sources.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-6 || sources.iter().any(|(_, p)| *p < 0.0) {
        return Err(Error::invalid(format!("composite proportions must sum to 1 (got {total})")));
    }
    let weights: Vec<f64> = sources.iter().map(|(_, p)| *p).collect();
    let quotas = largest_remainder(&weights, size);

    let mut glyphs = Vec::with_capacity(size);
    for (si, ((src, _), &quota)) in sources.iter().zip(&quotas).enumerate() {
        if quota == 0 {
            continue;
        }
        if src.is_empty() {
            return Err(Error::invalid(format!(
                "composite source `{}` has no glyphs but a quota of {quota}",
                src.name
            )));
        }
        let mut r = rng::stream(seed, &[rng::label("composite"), si as u64]);
        let relabel = |g: &GlyphImage, id: String| GlyphImage {
            pixels: g.pixels.clone(),
            script: name.to_string(),
            glyph_id: id,
            provenance: g.provenance.clone(),
            normalized: g.normalized,
        };
        if src.len() >= quota {
            let mut idx: Vec<usize> = (0..src.len()).collect();
            idx.shuffle(&mut r);
            let mut chosen = idx[..quota].to_vec();
            chosen.sort_unstable();
            for i in chosen {
                let g = &src.glyphs[i];
                glyphs.push(relabel(g, format!("{}/{}", src.name, g.glyph_id)));
            }
        } else {
            for g in &src.glyphs {
                glyphs.push(relabel(g, format!("{}/{}", src.name, g.glyph_id)));
            }
            for k in 0..quota - src.len() {
                let g = &src.glyphs[k % src.len()];
                let round = k / src.len();
                let mut aug = augment::augment_glyph(g, policy, &mut r);
                aug.script = name.to_string();
                aug.glyph_id = format!("{}/{}#aug{}", src.name, g.glyph_id, round);
                glyphs.push(aug);
            }
        }
    }
    let corpus = ScriptCorpus::new(name, role, glyphs);
    corpus.validate()?;
    Ok(corpus)
}

/// Random partition into train/val/test with sizes from largest-remainder
/// rounding of `ratios`. Deterministic for a fixed seed.
pub fn split(corpus: &ScriptCorpus, ratios: (f64, f64, f64), seed: u64) -> Result<ScriptCorpus> {
    let (a, b, c) = ratios;
    if ((a + b + c) - 1.0).abs() > 1e-9 || a < 0.0 || b < 0.0 || c < 0.0 {
        return Err(Error::invalid(format!("split ratios must sum to 1, got {a}+{b}+{c}")));
    }
    if corpus.len() < 10 {
        return Err(Error::invalid(format!(
            "corpus `{}` has {} glyphs; splitting needs at least 10",
            corpus.name,
            corpus.len()
        )));
    }
    let sizes = largest_remainder(&[a, b, c], corpus.len());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::label("split"), rng::label(&corpus.name)]));
    let mut labels = vec![SplitLabel::Train; corpus.len()];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = if pos < sizes[0] {
            SplitLabel::Train
        } else if pos < sizes[0] + sizes[1] {
            SplitLabel::Val
        } else {
            SplitLabel::Test
        };
    }
    let mut out = corpus.clone();
    out.splits = Some(labels);
    Ok(out)
}

/// Default split ratios.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.20, 0.10);

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_corpus(name: &str, n: usize) -> ScriptCorpus {
        let glyphs = (0..n)
            .map(|i| {
                let gray = Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x + i) % 7) as f64 / 7.0);
                GlyphImage::from_intensity(&gray, name, format!("{i:03}"))
            })
            .collect();
        ScriptCorpus::new(name, Role::Target, glyphs)
    }

    fn count(c: &ScriptCorpus, l: SplitLabel) -> usize {
        c.splits.as_ref().unwrap().iter().filter(|&&x| x == l).count()
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(&[0.7, 0.2, 0.1], 100), vec![70, 20, 10]);
        assert_eq!(largest_remainder(&[0.7, 0.2, 0.1], 10), vec![7, 2, 1]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 99), vec![33, 33, 33]);
        assert_eq!(largest_remainder(&[1.0 / 3.0; 3], 100), vec![34, 33, 33]);
        assert_eq!(largest_remainder(&[0.7, 0.2, 0.1], 11), vec![8, 2, 1]);
    }

    #[test]
    fn split_sizes() {
        let c = split(&toy_corpus("x", 100), SPLIT_RATIOS, 1).unwrap();
        assert_eq!((count(&c, SplitLabel::Train), count(&c, SplitLabel::Val), count(&c, SplitLabel::Test)), (70, 20, 10));
        let c = split(&toy_corpus("x", 10), SPLIT_RATIOS, 1).unwrap();
        assert_eq!((count(&c, SplitLabel::Train), count(&c, SplitLabel::Val), count(&c, SplitLabel::Test)), (7, 2, 1));
    }

    #[test]
    fn split_deterministic() {
        let a = split(&toy_corpus("x", 30), SPLIT_RATIOS, 9).unwrap();
        let b = split(&toy_corpus("x", 30), SPLIT_RATIOS, 9).unwrap();
        let c = split(&toy_corpus("x", 30), SPLIT_RATIOS, 10).unwrap();
        assert_eq!(a.splits, b.splits);
        assert_ne!(a.splits, c.splits);
    }

    #[test]
    fn split_errors() {
        assert!(split(&toy_corpus("x", 9), SPLIT_RATIOS, 0).is_err());
        assert!(split(&toy_corpus("x", 20), (0.7, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn composite_equal_thirds() {
        let (a, b, c) = (toy_corpus("a", 50), toy_corpus("b", 40), toy_corpus("c", 60));
        let t = 1.0 / 3.0;
        let comp = build_composite("mix", Role::Comparison, &[(&a, t), (&b, t), (&c, t)], 99, &AugmentationPolicy::default(), 3).unwrap();
        assert_eq!(comp.len(), 99);
        for src in ["a/", "b/", "c/"] {
            assert_eq!(comp.glyphs.iter().filter(|g| g.glyph_id.starts_with(src)).count(), 33);
        }
        assert!(comp.glyphs.iter().all(|g| g.script == "mix"));
    }

    #[test]
    fn composite_tops_up_small_source() {
        let (a, b) = (toy_corpus("a", 10), toy_corpus("b", 30));
        let comp = build_composite("mix", Role::Comparison, &[(&a, 0.5), (&b, 0.5)], 40, &AugmentationPolicy::default(), 3).unwrap();
        let from_a: Vec<_> = comp.glyphs.iter().filter(|g| g.glyph_id.starts_with("a/")).collect();
        assert_eq!(from_a.len(), 20);
        assert_eq!(from_a.iter().filter(|g| g.glyph_id.contains("#aug")).count(), 10);
    }

    #[test]
    fn composite_single_source_is_sample() {
        let a = toy_corpus("a", 12);
        let comp = build_composite("mix", Role::Comparison, &[(&a, 1.0)], 8, &AugmentationPolicy::default(), 3).unwrap();
        assert_eq!(comp.len(), 8);
        for g in &comp.glyphs {
            let orig = g.glyph_id.strip_prefix("a/").unwrap();
            let src = a.glyphs.iter().find(|o| o.glyph_id == orig).unwrap();
            assert_eq!(src.pixels, g.pixels);
        }
    }

    #[test]
    fn composite_rejects_empty_source() {
        let a = toy_corpus("a", 10);
        let empty = ScriptCorpus::new("e", Role::Comparison, vec![]);
        assert!(build_composite("mix", Role::Comparison, &[(&a, 0.5), (&empty, 0.5)], 10, &AugmentationPolicy::default(), 0).is_err());
    }

    #[test]
    fn double_normalisation_forbidden() {
        let mut g = GlyphImage::raw(Array3::from_elem((1, 20, 10), 0.5), "s", "g");
        g.standardize().unwrap();
        assert_eq!(g.pixels.dim(), (3, 224, 224));
        assert!(g.standardize().is_err());
    }

    #[test]
    fn denoise_runs_before_standardize() {
        let raw = Array3::from_elem((3, 30, 20), 0.8);
        let mut seen = Vec::new();
        let cfg = PreprocessConfig::default();
        preprocess(&raw, true, &cfg, &mut |s| seen.push(s)).unwrap();
        assert_eq!(seen, vec![Step::Grayscale, Step::Denoise, Step::SquarePad, Step::Standardize]);
        let mut seen = Vec::new();
        let after = PreprocessConfig { denoise_stage: DenoiseStage::AfterPad, ..cfg };
        preprocess(&raw, true, &after, &mut |s| seen.push(s)).unwrap();
        assert_eq!(seen, vec![Step::Grayscale, Step::SquarePad, Step::Denoise, Step::Standardize]);
        let mut seen = Vec::new();
        preprocess(&raw, false, &cfg, &mut |s| seen.push(s)).unwrap();
        assert!(!seen.contains(&Step::Denoise));
    }
}
