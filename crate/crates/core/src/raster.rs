//! Low-level raster utilities shared by preprocessing, augmentation and
//! rendering. Rasters are `f64` arrays: grayscale as `(H, W)`, multi-channel
//! as `(C, H, W)`.

use ndarray::{Array2, Array3, ArrayView2, Axis};

/// Luminance weights for RGB to grayscale conversion.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Converts a channel-first RGB (or already single-channel) raster to
/// grayscale intensity.
pub fn to_gray(img: &Array3<f64>) -> Array2<f64> {
    match img.len_of(Axis(0)) {
        1 => img.index_axis(Axis(0), 0).to_owned(),
        3 | 4 => {
            let r = img.index_axis(Axis(0), 0);
            let g = img.index_axis(Axis(0), 1);
            let b = img.index_axis(Axis(0), 2);
            let mut out = Array2::zeros(r.raw_dim());
            ndarray::Zip::from(&mut out)
                .and(&r)
                .and(&g)
                .and(&b)
                .for_each(|o, &r, &g, &b| *o = LUMA[0] * r + LUMA[1] * g + LUMA[2] * b);
            out
        }
        _ => img
            .mean_axis(Axis(0))
            .expect("raster has at least one channel"),
    }
}

/// Decodes an image file into a `(C, H, W)` raster with values in `[0, 1]`.
pub fn from_dynamic(img: &image::DynamicImage) -> Array3<f64> {
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f64;
        }
    }
    out
}

/// Encodes a grayscale intensity raster (values clamped to `[0, 1]`) as an
/// 8-bit luma image.
pub fn to_luma8(img: ArrayView2<'_, f64>) -> image::GrayImage {
    let (h, w) = img.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = img[[y as usize, x as usize]].clamp(0.0, 1.0);
        image::Luma([(v * 255.0).round() as u8])
    })
}

/// 1-D Gaussian kernel truncated at `radius` taps each side, normalised to
/// unit sum.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let x = i as f64 - radius as f64;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    // BORDER_REFLECT_101 (mirror without repeating the edge pixel).
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Separable convolution with a symmetric 1-D kernel, reflect-101 borders.
pub fn separable_filter(img: ArrayView2<'_, f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (kernel.len() / 2) as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * img[[y, reflect(x as isize + t as isize - r, w)]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - r, h);
            let src = tmp.row(sy);
            let mut dst = out.row_mut(y);
            dst.scaled_add(kv, &src);
        }
    }
    out
}

/// Gaussian blur with standard deviation `sigma` (radius `ceil(3 sigma)`).
pub fn gaussian_blur(img: ArrayView2<'_, f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.to_owned();
    }
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    separable_filter(img, &gaussian_kernel(sigma, radius))
}

/// Resamples one axis with a triangle (bilinear) filter whose support widens
/// when downscaling, so shrinking large scans averages instead of aliasing.
fn resample_axis(img: ArrayView2<'_, f64>, out_len: usize, axis: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let in_len = if axis == 0 { h } else { w };
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    let mut weights: Vec<(usize, Vec<f64>)> = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let center = (o as f64 + 0.5) * scale;
        let lo = ((center - support).floor().max(0.0)) as usize;
        let hi = ((center + support).ceil() as usize).min(in_len);
        let mut ws: Vec<f64> = (lo..hi)
            .map(|i| {
                let d = ((i as f64 + 0.5) - center).abs() / support;
                (1.0 - d).max(0.0)
            })
            .collect();
        let s: f64 = ws.iter().sum();
        if s > 0.0 {
            ws.iter_mut().for_each(|v| *v /= s);
        } else {
            // Degenerate: nearest neighbour.
            let n = (center.floor() as usize).min(in_len - 1);
            weights.push((n, vec![1.0]));
            continue;
        }
        weights.push((lo, ws));
    }
    if axis == 0 {
        let mut out = Array2::zeros((out_len, w));
        for (o, (lo, ws)) in weights.iter().enumerate() {
            let mut row = out.row_mut(o);
            for (k, &wt) in ws.iter().enumerate() {
                row.scaled_add(wt, &img.row(lo + k));
            }
        }
        out
    } else {
        let mut out = Array2::zeros((h, out_len));
        for y in 0..h {
            for (o, (lo, ws)) in weights.iter().enumerate() {
                let mut acc = 0.0;
                for (k, &wt) in ws.iter().enumerate() {
                    acc += wt * img[[y, lo + k]];
                }
                out[[y, o]] = acc;
            }
        }
        out
    }
}

/// Resizes a grayscale raster to `(out_h, out_w)`. Same-size input is
/// returned unchanged.
pub fn resize(img: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    if (h, w) == (out_h, out_w) {
        return img.to_owned();
    }
    let tmp = if h != out_h {
        resample_axis(img, out_h, 0)
    } else {
        img.to_owned()
    };
    if w != out_w {
        resample_axis(tmp.view(), out_w, 1)
    } else {
        tmp
    }
}

/// Bilinear sample at fractional `(y, x)`; coordinates outside the raster
/// blend towards `fill`.
#[inline]
pub fn sample_bilinear(img: ArrayView2<'_, f64>, y: f64, x: f64, fill: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let px = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            fill
        } else {
            img[[yy as usize, xx as usize]]
        }
    };
    let (yi, xi) = (y0 as isize, x0 as isize);
    if fy == 0.0 && fx == 0.0 {
        return px(yi, xi);
    }
    let top = px(yi, xi) * (1.0 - fx) + px(yi, xi + 1) * fx;
    let bot = px(yi + 1, xi) * (1.0 - fx) + px(yi + 1, xi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Applies an inverse affine map: output pixel `(y, x)` reads the source at
/// `m * [x - cx, y - cy] + [cx, cy] + t` where `c` is the raster centre.
/// `m` is row-major `[[a, b], [c, d]]` acting on `(x, y)`.
pub fn warp_affine(img: ArrayView2<'_, f64>, m: [[f64; 2]; 2], t: [f64; 2], fill: f64) -> Array2<f64> {
    let (h, w) = img.dim();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        let sx = m[0][0] * dx + m[0][1] * dy + cx + t[0];
        let sy = m[1][0] * dx + m[1][1] * dy + cy + t[1];
        sample_bilinear(img, sy, sx, fill)
    })
}

/// Mean intensity over the outermost ring of pixels.
pub fn border_mean(img: ArrayView2<'_, f64>) -> f64 {
    let (h, w) = img.dim();
    if h == 0 || w == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                sum += img[[y, x]];
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Summed-area table with a zero row/column prepended.
pub fn integral(img: ArrayView2<'_, f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += img[[y, x]];
            s[[y + 1, x + 1]] = s[[y, x + 1]] + row;
        }
    }
    s
}

/// Sum over the half-open window `[y0, y1) x [x0, x1)` from a summed-area table.
#[inline]
pub fn window_sum(s: &Array2<f64>, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
    s[[y1, x1]] - s[[y0, x1]] - s[[y1, x0]] + s[[y0, x0]]
}
