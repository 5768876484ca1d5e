//! Gradient-weighted activation maps for both encoder pathways.
//!
//! The encoder has no class logits, so the scalar that is backpropagated
//! is the L2 norm of the fused embedding. Its gradient is pushed through
//! the projection head into the pathway features and from there onto the
//! target layer: the last residual block output for the CNN and the
//! final-stage token grid for the transformer.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::GlyphImage;
use crate::model::{stack_glyphs, HybridEncoder, ResNet};
use crate::nn::{Ctx, Grads};
use crate::raster;
use crate::{Error, Result};

/// Gradients smaller than this in every channel count as an all-zero field.
const ZERO_GRAD: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Cnn,
    Swin,
}

impl Pathway {
    pub const ALL: [Pathway; 2] = [Pathway::Cnn, Pathway::Swin];

    /// Identifier of the layer whose activations are explained.
    pub fn layer(self) -> &'static str {
        match self {
            Pathway::Cnn => "cnn.layer4",
            Pathway::Swin => "swin.stage4",
        }
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pathway::Cnn => "cnn",
            Pathway::Swin => "swin",
        })
    }
}

impl FromStr for Pathway {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cnn" => Ok(Pathway::Cnn),
            "swin" => Ok(Pathway::Swin),
            other => Err(Error::invalid(format!("unknown pathway `{other}` (expected cnn or swin)"))),
        }
    }
}

/// One heat map. `heat` has the input's spatial extent; `grid` is the
/// rectified map at the target layer's resolution before upsampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMap {
    pub pathway: Pathway,
    pub glyph_id: String,
    pub layer: String,
    pub heat: Array2<f64>,
    pub grid: Array2<f64>,
    pub degenerate: bool,
}

/// Computes the map for one glyph. The encoder is only read.
pub fn grad_cam(enc: &HybridEncoder, glyph: &GlyphImage, pathway: Pathway) -> Result<AttentionMap> {
    Ok(grad_cam_both(enc, glyph)?.into_iter().find(|m| m.pathway == pathway).expect("both pathways computed"))
}

/// Computes the CNN and transformer maps from a single forward pass.
pub fn grad_cam_both(enc: &HybridEncoder, glyph: &GlyphImage) -> Result<Vec<AttentionMap>> {
    let x = stack_glyphs(&[glyph])?;
    let size = enc.config.input_size;
    let (feat, cache) = enc.forward(x, &Ctx::eval_recording())?;
    let cache = cache.expect("recording context keeps caches");

    let z = feat.fused.row(0);
    let norm = z.dot(&z).sqrt();
    if !norm.is_finite() {
        return Err(Error::invalid(format!("non-finite embedding for glyph `{}`", glyph.glyph_id)));
    }
    let dfused = if norm > 0.0 { feat.fused.mapv(|v| v / norm) } else { Array2::zeros(feat.fused.raw_dim()) };
    let mut g = Grads::inputs_only();
    let dz = enc.head.backward(&cache.head, dfused, &mut g);
    let k = enc.config.cnn_out();
    let dcnn = dz.slice(s![.., ..k]).to_owned();
    let dswin = dz.slice(s![.., k..]).to_owned();

    // CNN: activations and gradients as (C, h, w).
    let a = cache.cnn.feature_map.index_axis(Axis(0), 0);
    let da = ResNet::feature_map_grad(&cache.cnn, &dcnn);
    let da = da.index_axis(Axis(0), 0);
    let (c, h, w) = a.dim();
    let weights: Vec<f64> = (0..c).map(|ch| da.index_axis(Axis(0), ch).mean().unwrap_or(0.0)).collect();
    let mut cnn_grid = Array2::zeros((h, w));
    for (ch, &wt) in weights.iter().enumerate() {
        cnn_grid.scaled_add(wt, &a.index_axis(Axis(0), ch));
    }
    let cnn_zero = weights.iter().all(|v| v.abs() < ZERO_GRAD);

    // Transformer: tokens (res*res, C) in row-major grid order.
    let res = enc.swin.final_res();
    let t = &cache.swin.tokens;
    let dt = enc.swin.tokens_grad(&cache.swin, &dswin);
    let weights = dt.mean_axis(Axis(0)).expect("non-empty token grid");
    let swin_grid = t.dot(&weights).into_shape_with_order((res, res)).map_err(|e| Error::shape(e.to_string()))?;
    let swin_zero = weights.iter().all(|v| v.abs() < ZERO_GRAD);

    Ok(vec![
        finish(Pathway::Cnn, glyph, cnn_grid, cnn_zero, size),
        finish(Pathway::Swin, glyph, swin_grid, swin_zero, size),
    ])
}

fn finish(pathway: Pathway, glyph: &GlyphImage, grid: Array2<f64>, zero_grad: bool, size: usize) -> AttentionMap {
    let grid = grid.mapv(|v| v.max(0.0));
    let up = raster::resize(grid.view(), size, size);
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let flat = !(hi - lo > 1e-12 * hi.abs().max(1.0));
    let degenerate = zero_grad || flat;
    let heat = if degenerate { Array2::zeros((size, size)) } else { up.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)) };
    AttentionMap {
        pathway,
        glyph_id: glyph.glyph_id.clone(),
        layer: pathway.layer().to_string(),
        heat,
        grid,
        degenerate,
    }
}

/// Share of the heat mass in the top-decile pixels that falls on `mask`.
/// Returns `None` when the map carries no heat.
pub fn top_decile_mass_on(heat: &Array2<f64>, mask: &Array2<bool>) -> Result<Option<f64>> {
    if heat.dim() != mask.dim() {
        return Err(Error::shape(format!("heat {:?} vs mask {:?}", heat.dim(), mask.dim())));
    }
    let mut vals: Vec<f64> = heat.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    let cut = vals[((vals.len() as f64) * 0.9).floor() as usize].min(vals[vals.len() - 1]);
    let (mut total, mut inside) = (0.0, 0.0);
    for (&h, &m) in heat.iter().zip(mask.iter()) {
        if h >= cut && h > 0.0 {
            total += h;
            if m {
                inside += h;
            }
        }
    }
    Ok((total > 0.0).then(|| inside / total))
}

/// Between-window variance of the window means and the mean within-window
/// variance for square windows of side `cell`.
pub fn window_variance(heat: &Array2<f64>, cell: usize) -> (f64, f64) {
    let (h, w) = heat.dim();
    let cell = cell.max(1);
    let mut means = Vec::new();
    let mut within = Vec::new();
    for y0 in (0..h).step_by(cell) {
        for x0 in (0..w).step_by(cell) {
            let block = heat.slice(s![y0..(y0 + cell).min(h), x0..(x0 + cell).min(w)]);
            let m = block.mean().unwrap_or(0.0);
            means.push(m);
            within.push(block.mapv(|v| (v - m).powi(2)).mean().unwrap_or(0.0));
        }
    }
    let gm = means.iter().sum::<f64>() / means.len() as f64;
    let between = means.iter().map(|m| (m - gm).powi(2)).sum::<f64>() / means.len() as f64;
    (between, within.iter().sum::<f64>() / within.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn small() -> EncoderConfig {
        let mut c = EncoderConfig::tiny();
        c.input_size = 64;
        c.window = 2;
        c
    }

    fn glyph_plane(size: usize) -> (Array2<f64>, Array2<bool>) {
        // Dark cross on a light page.
        let mut g = Array2::from_elem((size, size), 0.95);
        let mut m = Array2::from_elem((size, size), false);
        let a = size / 3;
        let b = 2 * size / 3;
        for y in 0..size {
            for x in 0..size {
                let bar_v = (a + 4..b - 4).contains(&x) && (size / 8..7 * size / 8).contains(&y);
                let bar_h = (a + 4..b - 4).contains(&y) && (size / 8..7 * size / 8).contains(&x);
                if bar_v || bar_h {
                    g[[y, x]] = 0.05;
                    m[[y, x]] = true;
                }
            }
        }
        (g, m)
    }

    #[test]
    fn maps_are_normalised_and_full_size() {
        let enc = HybridEncoder::new(small(), 3).unwrap();
        let (plane, _) = glyph_plane(64);
        let glyph = GlyphImage::from_intensity(&plane, "x", "g0");
        for m in grad_cam_both(&enc, &glyph).unwrap() {
            assert_eq!(m.heat.dim(), (64, 64));
            assert!(m.heat.iter().all(|v| (0.0..=1.0).contains(v)));
            if !m.degenerate {
                let max = m.heat.iter().cloned().fold(0.0, f64::max);
                assert_eq!(max, 1.0);
            }
            assert_eq!(m.glyph_id, "g0");
        }
    }

    #[test]
    fn deterministic_and_read_only() {
        let enc = HybridEncoder::new(small(), 5).unwrap();
        let before = format!("{:?}", enc.head);
        let (plane, _) = glyph_plane(64);
        let glyph = GlyphImage::from_intensity(&plane, "x", "g");
        let a = grad_cam(&enc, &glyph, Pathway::Cnn).unwrap();
        let b = grad_cam(&enc, &glyph, Pathway::Swin).unwrap();
        let c = grad_cam(&enc, &glyph, Pathway::Cnn).unwrap();
        assert_eq!(a.heat, c.heat);
        assert_eq!(b.pathway, Pathway::Swin);
        assert_eq!(format!("{:?}", enc.head), before);
    }

    #[test]
    fn blank_input_has_no_structure() {
        let enc = HybridEncoder::new(small(), 1).unwrap();
        let glyph = GlyphImage::from_intensity(&Array2::from_elem((64, 64), 0.8), "x", "blank");
        for m in grad_cam_both(&enc, &glyph).unwrap() {
            if !m.degenerate {
                // Only border effects of zero padding may vary.
                let inner = m.grid.slice(s![1..-1, 1..-1]).to_owned();
                if inner.len() > 1 {
                    let (lo, hi) = inner.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
                    let scale = m.grid.iter().cloned().fold(0.0, f64::max);
                    assert!(hi - lo <= 1e-9 * scale.max(1.0), "{}: {lo} {hi}", m.pathway);
                }
            }
        }
    }

    #[test]
    fn top_decile_metric() {
        let mut heat = Array2::zeros((10, 10));
        let mut mask = Array2::from_elem((10, 10), false);
        for x in 0..10 {
            heat[[0, x]] = 1.0;
            mask[[0, x]] = x < 7;
        }
        assert!((top_decile_mass_on(&heat, &mask).unwrap().unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(top_decile_mass_on(&Array2::zeros((4, 4)), &Array2::from_elem((4, 4), true)).unwrap(), None);
        assert!(top_decile_mass_on(&heat, &Array2::from_elem((3, 3), true)).is_err());
    }

    #[test]
    fn window_variance_separates_blocky_maps() {
        let blocky = Array2::from_shape_fn((16, 16), |(y, x)| ((y / 4 + x / 4) % 2) as f64);
        let (b, w) = window_variance(&blocky, 4);
        assert!(b > 0.2 && w == 0.0);
        let stripes = Array2::from_shape_fn((16, 16), |(_, x)| (x % 2) as f64);
        let (b, w) = window_variance(&stripes, 4);
        assert!(b == 0.0 && w > 0.2);
    }

    #[test]
    fn zero_gradient_is_flagged() {
        let glyph = GlyphImage::from_intensity(&Array2::zeros((8, 8)), "x", "z");
        let m = finish(Pathway::Cnn, &glyph, Array2::from_elem((2, 2), 3.0), true, 8);
        assert!(m.degenerate);
        assert!(m.heat.iter().all(|&v| v == 0.0));
        let m = finish(Pathway::Cnn, &glyph, Array2::from_elem((2, 2), -1.0), false, 8);
        assert!(m.degenerate);
    }

    #[test]
    fn pathway_round_trip() {
        for p in Pathway::ALL {
            assert_eq!(p.to_string().parse::<Pathway>().unwrap(), p);
        }
        assert!("vit".parse::<Pathway>().is_err());
    }
}
