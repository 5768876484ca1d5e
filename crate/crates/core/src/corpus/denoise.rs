//! Manuscript-scan cleanup: Gaussian adaptive thresholding, a 2x2 closing
//! and non-local-means smoothing.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::raster;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseConfig {
    /// Adaptive-threshold neighbourhood (odd, >= 3).
    pub block_size: usize,
    /// Constant subtracted from the local weighted mean, in 8-bit units.
    pub offset: f64,
    /// Non-local-means filter strength, in 8-bit units.
    pub nlm_strength: f64,
    /// Non-local-means patch side (odd).
    pub nlm_patch: usize,
    /// Non-local-means search window side (odd).
    pub nlm_search: usize,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        Self {
            block_size: 11,
            offset: 2.0,
            nlm_strength: 10.0,
            nlm_patch: 7,
            nlm_search: 21,
        }
    }
}

/// Binarises with a Gaussian-weighted local threshold: a pixel becomes 1
/// (background) when it exceeds its neighbourhood's weighted mean minus the
/// offset, else 0 (ink).
pub fn adaptive_threshold(img: ArrayView2<'_, f64>, block_size: usize, offset: f64) -> Array2<f64> {
    let block = block_size.max(3) | 1;
    let sigma = 0.3 * ((block as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let local = raster::separable_filter(img, &raster::gaussian_kernel(sigma, block / 2));
    let c = offset / 255.0;
    let mut out = Array2::zeros(img.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(&img)
        .and(&local)
        .for_each(|o, &v, &t| *o = if v > t - c { 1.0 } else { 0.0 });
    out
}

/// Morphological closing (dilation then erosion of the bright phase) with a
/// 2x2 structuring element. Removes dark specks narrower than two pixels.
pub fn close_2x2(img: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let dilated = Array2::from_shape_fn((h, w), |(y, x)| {
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                if y >= dy && x >= dx {
                    m = m.max(img[[y - dy, x - dx]]);
                }
            }
        }
        m
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut m = f64::INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                if y + dy < h && x + dx < w {
                    m = m.min(dilated[[y + dy, x + dx]]);
                }
            }
        }
        m
    })
}

fn reflect_pad(img: ArrayView2<'_, f64>, pad: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let refl = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let p = 2 * (n - 1);
        let mut i = i.rem_euclid(p);
        if i >= n {
            i = p - i;
        }
        i as usize
    };
    Array2::from_shape_fn((h + 2 * pad, w + 2 * pad), |(y, x)| {
        img[[
            refl(y as isize - pad as isize, h),
            refl(x as isize - pad as isize, w),
        ]]
    })
}

/// Non-local-means smoothing. Each pixel becomes a weighted average of the
/// pixels in its search window, weighted by `exp(-d / h^2)` where `d` is the
/// mean squared difference between the two surrounding patches.
pub fn non_local_means(img: ArrayView2<'_, f64>, strength: f64, patch: usize, search: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let pr = patch / 2;
    let sr = search / 2;
    let pad = pr + sr;
    let padded = reflect_pad(img, pad);
    let (ph, pw) = padded.dim();
    let h2 = (strength / 255.0).powi(2).max(1e-12);
    let area = ((2 * pr + 1) * (2 * pr + 1)) as f64;

    let mut num = Array2::<f64>::zeros((h, w));
    let mut den = Array2::<f64>::zeros((h, w));
    let mut diff = Array2::<f64>::zeros((ph, pw));
    for oy in -(sr as isize)..=(sr as isize) {
        for ox in -(sr as isize)..=(sr as isize) {
            // Squared difference between the image and its shifted copy,
            // valid wherever both samples lie inside the padded raster.
            for y in 0..ph {
                for x in 0..pw {
                    let (sy, sx) = (y as isize + oy, x as isize + ox);
                    diff[[y, x]] = if sy >= 0 && sx >= 0 && (sy as usize) < ph && (sx as usize) < pw {
                        let d = padded[[y, x]] - padded[[sy as usize, sx as usize]];
                        d * d
                    } else {
                        0.0
                    };
                }
            }
            let sat = raster::integral(diff.view());
            for y in 0..h {
                for x in 0..w {
                    let (cy, cx) = (y + pad, x + pad);
                    let d = raster::window_sum(&sat, cy - pr, cx - pr, cy + pr + 1, cx + pr + 1) / area;
                    let wgt = (-d / h2).exp();
                    let sy = (cy as isize + oy) as usize;
                    let sx = (cx as isize + ox) as usize;
                    num[[y, x]] += wgt * padded[[sy, sx]];
                    den[[y, x]] += wgt;
                }
            }
        }
    }
    num / den
}

/// Full manuscript cleanup chain on a grayscale raster in `[0, 1]`.
pub fn denoise_manuscript(img: ArrayView2<'_, f64>, cfg: &DenoiseConfig) -> Array2<f64> {
    let binary = adaptive_threshold(img, cfg.block_size, cfg.offset);
    let closed = close_2x2(binary.view());
    non_local_means(closed.view(), cfg.nlm_strength, cfg.nlm_patch, cfg.nlm_search)
        .mapv(|v| v.clamp(0.0, 1.0))
}
