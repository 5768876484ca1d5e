//! Geometric and photometric standardisation to the encoder's input contract.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::raster;

/// Encoder input side length.
pub const INPUT_SIZE: usize = 224;
/// Per-channel normalisation mean.
pub const NORM_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
/// Per-channel normalisation standard deviation.
pub const NORM_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Pads a `(C, H, W)` raster to `S x S` with `S = max(H, W)`, centring the
/// content. Each channel is filled with the mean of its own border ring.
/// When the padding is odd the extra row/column goes to the bottom/right.
pub fn square_pad(img: &Array3<f64>) -> Result<Array3<f64>> {
    let (c, h, w) = img.dim();
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("cannot pad an empty raster ({c}x{h}x{w})")));
    }
    if h == w {
        return Ok(img.clone());
    }
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let mut out = Array3::zeros((c, side, side));
    for ch in 0..c {
        let plane = img.index_axis(Axis(0), ch);
        let fill = raster::border_mean(plane);
        let mut dst = out.index_axis_mut(Axis(0), ch);
        dst.fill(fill);
        dst.slice_mut(s![top..top + h, left..left + w]).assign(&plane);
    }
    Ok(out)
}

/// Grayscale convenience wrapper around [`square_pad`].
pub fn square_pad_gray(img: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let padded = square_pad(&img.to_owned().insert_axis(Axis(0)))?;
    Ok(padded.index_axis_move(Axis(0), 0))
}

/// Replicates a square intensity plane to three channels and applies the
/// per-channel mean/std normalisation.
pub fn normalize_intensity(gray: ArrayView2<'_, f64>) -> Array3<f64> {
    let (h, w) = gray.dim();
    let mut out = Array3::zeros((3, h, w));
    for c in 0..3 {
        let (m, sd) = (NORM_MEAN[c], NORM_STD[c]);
        out.index_axis_mut(Axis(0), c)
            .zip_mut_with(&gray, |o, &v| *o = (v - m) / sd);
    }
    out
}

/// Inverse of [`normalize_intensity`] using channel 0.
pub fn denormalize(pixels: &Array3<f64>) -> Array2<f64> {
    pixels
        .index_axis(Axis(0), 0)
        .mapv(|v| v * NORM_STD[0] + NORM_MEAN[0])
}

/// Resizes a square-padded raster to `size x size`, converts it to a single
/// intensity plane, replicates it to three channels and normalises.
pub fn standardize(img: &Array3<f64>, size: usize) -> Result<Array3<f64>> {
    let (_, h, w) = img.dim();
    if h != w {
        return Err(Error::shape(format!("standardize expects a square raster, got {h}x{w}")));
    }
    if img.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("raster contains non-finite pixel values"));
    }
    let gray = raster::to_gray(img);
    let resized = raster::resize(gray.view(), size, size);
    Ok(normalize_intensity(resized.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn square_input_is_untouched() {
        let img = Array3::from_shape_fn((3, 224, 224), |(c, y, x)| (c + y * x) as f64 / 1e5);
        assert_eq!(square_pad(&img).unwrap(), img);
    }

    #[test]
    fn narrow_input_is_centred() {
        // 224 rows by 100 columns: 124 pad columns split 62/62.
        let img = Array3::from_elem((1, 224, 100), 0.0);
        let mut img = img;
        img.slice_mut(s![0, .., 0]).fill(1.0);
        let out = square_pad(&img).unwrap();
        assert_eq!(out.dim(), (1, 224, 224));
        // first content column sits at index 62, last at 161
        assert_eq!(out[[0, 10, 62]], 1.0);
        assert_eq!(out[[0, 10, 161]], 0.0);
        let fill = out[[0, 0, 0]];
        for x in (0..62).chain(162..224) {
            assert_eq!(out[[0, 50, x]], fill);
        }
    }

    #[test]
    fn three_by_one_ones() {
        let img = Array3::from_elem((1, 3, 1), 1.0);
        let out = square_pad(&img).unwrap();
        assert_eq!(out.dim(), (1, 3, 3));
        for y in 0..3 {
            assert_eq!(out[[0, y, 1]], 1.0);
        }
    }

    #[test]
    fn empty_raster_rejected() {
        let img = Array3::<f64>::zeros((1, 0, 5));
        assert!(matches!(square_pad(&img), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_gray_normalises_to_zero_on_channel_zero() {
        let img = Array3::from_elem((3, 50, 50), 0.485);
        let out = standardize(&img, INPUT_SIZE).unwrap();
        assert_eq!(out.dim(), (3, 224, 224));
        assert!(out.index_axis(Axis(0), 0).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn white_normalises_to_known_constant() {
        let img = Array3::from_elem((1, 10, 10), 1.0);
        let out = standardize(&img, INPUT_SIZE).unwrap();
        let expected = (1.0 - 0.485) / 0.229;
        assert_abs_diff_eq!(expected, 2.2489, epsilon = 1e-4);
        assert!(out
            .index_axis(Axis(0), 0)
            .iter()
            .all(|&v| (v - expected).abs() < 1e-12));
    }

    #[test]
    fn non_finite_rejected() {
        let mut img = Array3::from_elem((1, 4, 4), 0.5);
        img[[0, 1, 1]] = f64::NAN;
        assert!(standardize(&img, 8).is_err());
    }

    #[test]
    fn normalisation_round_trip() {
        let gray = Array2::from_shape_fn((8, 8), |(y, x)| (y * 8 + x) as f64 / 64.0);
        let back = denormalize(&normalize_intensity(gray.view()));
        for (a, b) in gray.iter().zip(back.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
