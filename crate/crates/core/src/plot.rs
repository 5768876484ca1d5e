//! Raster figures. Each PNG gets a JSON sidecar with the title and the
//! data it was drawn from, since the images carry no text.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::Serialize;

use crate::explain::AttentionMap;
use crate::structure::{Dendrogram, Heatmap, Projection, ProjectionMethod};
use crate::{Error, Result};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const MARGIN: u32 = 24;

/// Categorical colours for up to ten groups, cycled beyond.
const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn group_color(i: usize) -> Rgb<u8> {
    Rgb(PALETTE[i % PALETTE.len()])
}

/// Blue-to-red ramp for values in `[0, 1]`.
pub fn heat_color(v: f64) -> Rgb<u8> {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    Rgb([(r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8])
}

/// `figure.png` -> `figure.json`.
pub fn sidecar_path(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn save(img: &RgbImage, path: &Path, sidecar: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar)?;
    std::fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, c: Rgb<u8>) {
    for x in x0.min(x1)..=x0.max(x1) {
        put(img, x, y, c);
    }
}

fn vline(img: &mut RgbImage, x: i64, y0: i64, y1: i64, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        put(img, x, y, c);
    }
}

fn disc(img: &mut RgbImage, cx: i64, cy: i64, r: i64, c: Rgb<u8>) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, cx + dx, cy + dy, c);
            }
        }
    }
}

#[derive(Serialize)]
struct DendrogramSidecar<'a> {
    title: String,
    leaf_order: Vec<&'a str>,
    dendrogram: &'a Dendrogram,
}

/// Draws the tree with leaves along the bottom edge, each leaf marked with
/// its group colour.
pub fn dendrogram_png(d: &Dendrogram, path: &Path) -> Result<()> {
    let n = d.n_leaves();
    if n == 0 {
        return Err(Error::invalid("empty dendrogram"));
    }
    let step = 48u32;
    let (w, h) = (2 * MARGIN + step * n as u32, 320u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let order = d.leaf_order();
    let mut x = vec![0.0; n + d.merges.len()];
    for (pos, &leaf) in order.iter().enumerate() {
        x[leaf] = (MARGIN + step * pos as u32 + step / 2) as f64;
    }
    let top = d.merges.iter().map(|m| m.height).fold(0.0, f64::max).max(1e-12);
    let base = (h - MARGIN) as f64;
    let span = (h - 2 * MARGIN) as f64;
    let ypix = |height: f64| (base - span * height / top).round() as i64;
    let mut y = vec![base as i64; n + d.merges.len()];
    for (k, m) in d.merges.iter().enumerate() {
        let node = n + k;
        let ym = ypix(m.height);
        let (xa, xb) = (x[m.a].round() as i64, x[m.b].round() as i64);
        vline(&mut img, xa, y[m.a], ym, BLACK);
        vline(&mut img, xb, y[m.b], ym, BLACK);
        hline(&mut img, xa, xb, ym, BLACK);
        x[node] = (x[m.a] + x[m.b]) / 2.0;
        y[node] = ym;
    }
    for (pos, &leaf) in order.iter().enumerate() {
        disc(&mut img, x[leaf].round() as i64, base as i64 + 8, 5, group_color(pos));
    }
    let sidecar = DendrogramSidecar {
        title: format!("Hierarchical clustering ({} linkage)", d.linkage),
        leaf_order: order.iter().map(|&i| d.labels[i].as_str()).collect(),
        dendrogram: d,
    };
    save(&img, path, &sidecar)
}

#[derive(Serialize)]
struct ScatterSidecar<'a> {
    title: String,
    axes: Vec<String>,
    groups: Vec<&'a str>,
    items: Vec<ScatterPoint<'a>>,
}

#[derive(Serialize)]
struct ScatterPoint<'a> {
    id: &'a str,
    group: &'a str,
    x: f64,
    y: f64,
}

/// Axis titles; PCA axes carry their explained-variance share.
pub fn projection_axes(p: &Projection) -> Vec<String> {
    (0..p.coords.ncols().min(2))
        .map(|i| match p.method {
            ProjectionMethod::Pca => {
                format!("PC{} ({:.1}%)", i + 1, 100.0 * p.explained.get(i).copied().unwrap_or(0.0))
            }
            ProjectionMethod::Tsne => format!("t-SNE {}", i + 1),
        })
        .collect()
}

/// 2-D scatter of a projection, one colour per group.
pub fn scatter_png(p: &Projection, ids: &[String], groups: &[String], title: &str, path: &Path) -> Result<()> {
    let n = p.coords.nrows();
    if ids.len() != n || groups.len() != n {
        return Err(Error::shape(format!("{n} points but {} ids and {} groups", ids.len(), groups.len())));
    }
    if n == 0 || p.coords.ncols() == 0 {
        return Err(Error::invalid("empty projection"));
    }
    let mut names: Vec<&str> = Vec::new();
    for g in groups {
        if !names.contains(&g.as_str()) {
            names.push(g);
        }
    }
    let col = |i: usize, c: usize| if c < p.coords.ncols() { p.coords[[i, c]] } else { 0.0 };
    let range = |c: usize| {
        let (lo, hi) = (0..n).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), i| (l.min(col(i, c)), h.max(col(i, c))));
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xs), (y0, ys)) = (range(0), range(1));
    let side = 480u32;
    let inner = (side - 2 * MARGIN) as f64;
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    hline(&mut img, MARGIN as i64, (side - MARGIN) as i64, (side - MARGIN) as i64, BLACK);
    vline(&mut img, MARGIN as i64, MARGIN as i64, (side - MARGIN) as i64, BLACK);
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let gx = MARGIN as f64 + inner * (col(i, 0) - x0) / xs;
        let gy = (side - MARGIN) as f64 - inner * (col(i, 1) - y0) / ys;
        let gi = names.iter().position(|g| *g == groups[i]).expect("group collected");
        disc(&mut img, gx.round() as i64, gy.round() as i64, 3, group_color(gi));
        items.push(ScatterPoint { id: &ids[i], group: &groups[i], x: col(i, 0), y: col(i, 1) });
    }
    let sidecar = ScatterSidecar { title: title.to_string(), axes: projection_axes(p), groups: names, items };
    save(&img, path, &sidecar)
}

#[derive(Serialize)]
struct HeatmapSidecar<'a> {
    title: &'a str,
    heatmap: &'a Heatmap,
}

/// Similarity matrix as coloured cells, scaled between its off-diagonal
/// minimum and 1.
pub fn heatmap_png(h: &Heatmap, title: &str, path: &Path) -> Result<()> {
    let k = h.labels.len();
    if k == 0 || h.matrix.dim() != (k, k) {
        return Err(Error::shape(format!("heatmap with {k} labels and a {:?} matrix", h.matrix.dim())));
    }
    let lo = h
        .matrix
        .indexed_iter()
        .filter(|((a, b), _)| a != b)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let lo = if lo.is_finite() && lo < 1.0 { lo } else { 0.0 };
    let cell = 40u32;
    let side = 2 * MARGIN + cell * k as u32;
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    for ((a, b), &v) in h.matrix.indexed_iter() {
        let c = heat_color((v - lo) / (1.0 - lo));
        for y in 0..cell {
            for x in 0..cell {
                img.put_pixel(MARGIN + b as u32 * cell + x, MARGIN + a as u32 * cell + y, c);
            }
        }
    }
    save(&img, path, &HeatmapSidecar { title, heatmap: h })
}

#[derive(Serialize)]
struct OverlaySidecar<'a> {
    title: String,
    glyph_id: &'a str,
    pathway: String,
    layer: &'a str,
    degenerate: bool,
    grid: &'a Array2<f64>,
}

/// Blends the heat map over the glyph's intensity plane. The full-size heat
/// grid is written next to the image as CSV.
pub fn overlay_png(intensity: &Array2<f64>, map: &AttentionMap, path: &Path) -> Result<()> {
    if intensity.dim() != map.heat.dim() {
        return Err(Error::shape(format!("glyph {:?} vs heat {:?}", intensity.dim(), map.heat.dim())));
    }
    let (h, w) = intensity.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for ((y, x), &g) in intensity.indexed_iter() {
        let base = (g.clamp(0.0, 1.0) * 255.0).round();
        let c = heat_color(map.heat[[y, x]]);
        let blend = |ch: u8| (0.5 * base + 0.5 * ch as f64).round() as u8;
        img.put_pixel(x as u32, y as u32, Rgb([blend(c[0]), blend(c[1]), blend(c[2])]));
    }
    let sidecar = OverlaySidecar {
        title: format!("{} ({} pathway)", map.glyph_id, map.pathway),
        glyph_id: &map.glyph_id,
        pathway: map.pathway.to_string(),
        layer: &map.layer,
        degenerate: map.degenerate,
        grid: &map.grid,
    };
    save(&img, path, &sidecar)?;
    let csv_path = path.with_extension("csv");
    let mut text = String::with_capacity(h * w * 10);
    for row in map.heat.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::explain::Pathway;
    use crate::structure::{hierarchical_cluster, Linkage};

    #[test]
    fn colour_ramp_ends() {
        assert_eq!(heat_color(0.0), Rgb([0, 0, 128]));
        assert_eq!(heat_color(1.0), Rgb([128, 0, 0]));
        assert_eq!(heat_color(f64::NAN), heat_color(0.0));
    }

    #[test]
    fn figures_and_sidecars_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let labels: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let dist = ndarray::array![[0.0, 0.1, 0.9], [0.1, 0.0, 0.8], [0.9, 0.8, 0.0]];
        let d = hierarchical_cluster(&dist, &labels, Linkage::Average).unwrap();
        let p = dir.path().join("tree.png");
        dendrogram_png(&d, &p).unwrap();
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side["title"], "Hierarchical clustering (average linkage)");
        assert!(image::open(&p).is_ok());

        let proj = Projection {
            method: ProjectionMethod::Pca,
            coords: ndarray::array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]],
            explained: vec![0.75, 0.25],
            rank_deficient: false,
        };
        let p = dir.path().join("pca.png");
        scatter_png(&proj, &labels, &labels, "PCA", &p).unwrap();
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(side["axes"][0], "PC1 (75.0%)");
        assert!(scatter_png(&proj, &labels[..2], &labels, "x", &p).is_err());

        let hm = Heatmap { labels: labels.clone(), matrix: Array2::from_elem((3, 3), 0.5) };
        heatmap_png(&hm, "sim", &dir.path().join("hm.png")).unwrap();

        let map = AttentionMap {
            pathway: Pathway::Cnn,
            glyph_id: "g".into(),
            layer: "cnn.layer4".into(),
            heat: Array2::from_shape_fn((8, 8), |(y, _)| y as f64 / 7.0),
            grid: Array2::ones((2, 2)),
            degenerate: false,
        };
        let p = dir.path().join("cam.png");
        overlay_png(&Array2::from_elem((8, 8), 0.9), &map, &p).unwrap();
        let csv = std::fs::read_to_string(p.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 8);
        assert!(overlay_png(&Array2::zeros((4, 4)), &map, &p).is_err());
    }
}
