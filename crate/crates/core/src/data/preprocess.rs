//! Raw-grid → canonical-tensor preprocessing.
//!
//! Every source image, whatever its size, is zero-padded to the canonical
//! 5:4 height:width aspect ratio (extra row/column on the bottom/right when
//! the padding is odd), bilinearly resized to 640×512, and min-max
//! normalized per image to [0,1]. Stored saliency grids follow the same
//! geometry so they stay pixel-aligned with their image, then renormalize
//! to sum 1.

use super::{CanonicalImage, SaliencyMap};
use crate::nn::pool::bilinear_resize_plane;
use crate::{Error, Result, CANON_H, CANON_W};
use ndarray::{s, Array2};

/// Zero-pads a grid to the 5:4 (height:width) aspect ratio. When the grid
/// is too short, rows are added half on top, half on bottom (bottom takes
/// the odd one); when too narrow, columns likewise (right takes the odd
/// one). Already-5:4 grids are returned unchanged.
pub fn pad_to_aspect(raw: &Array2<f32>) -> Array2<f32> {
    let (h, w) = raw.dim();
    // target: 4·H = 5·W
    if 4 * h < 5 * w {
        // too short: grow height to ceil(5W/4)
        let target_h = (5 * w).div_ceil(4);
        let extra = target_h - h;
        let top = extra / 2;
        let mut out = Array2::<f32>::zeros((target_h, w));
        out.slice_mut(s![top..top + h, ..]).assign(raw);
        out
    } else if 4 * h > 5 * w {
        // too narrow: grow width to ceil(4H/5)
        let target_w = (4 * h).div_ceil(5);
        let extra = target_w - w;
        let left = extra / 2;
        let mut out = Array2::<f32>::zeros((h, target_w));
        out.slice_mut(s![.., left..left + w]).assign(raw);
        out
    } else {
        raw.clone()
    }
}

/// Full preprocessing chain: pad → resize → per-image min-max to [0,1].
/// Constant inputs (max = min) normalize to all zeros.
pub fn preprocess_image(raw: &Array2<f32>) -> Result<CanonicalImage> {
    let (h, w) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::Validation("cannot preprocess an empty image".into()));
    }
    let (mut raw_lo, mut raw_hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in raw.iter() {
        if !v.is_finite() {
            return Err(Error::Validation("image contains non-finite values".into()));
        }
        raw_lo = raw_lo.min(v);
        raw_hi = raw_hi.max(v);
    }
    // degenerate normalization is decided on the source values: a constant
    // image is information-free and maps to zeros even though aspect padding
    // would otherwise introduce a spurious 0-vs-constant contrast
    if raw_hi == raw_lo {
        return CanonicalImage::new(Array2::zeros((CANON_H, CANON_W)));
    }
    let padded = pad_to_aspect(raw);
    let resized = bilinear_resize_plane(&padded, CANON_H, CANON_W);

    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for &v in resized.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        // resampling collapsed the dynamic range entirely
        return CanonicalImage::new(Array2::zeros((CANON_H, CANON_W)));
    }
    let scale = 1.0 / (hi - lo);
    let normalized = resized.mapv(|v| ((v - lo) * scale).clamp(0.0, 1.0));
    CanonicalImage::new(normalized)
}

/// Aligns a stored saliency grid with the canonical image geometry (same
/// pad + resize) and renormalizes it to a distribution.
pub fn preprocess_saliency_grid(raw: &Array2<f64>) -> Result<SaliencyMap> {
    let (h, w) = raw.dim();
    if h == 0 || w == 0 {
        return Err(Error::Validation("cannot preprocess an empty saliency grid".into()));
    }
    if raw.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation(
            "saliency grid must be finite and nonnegative".into(),
        ));
    }
    let as_f32 = raw.mapv(|v| v as f32);
    let padded = pad_to_aspect(&as_f32);
    let resized = bilinear_resize_plane(&padded, CANON_H, CANON_W);
    // bilinear interpolation of nonnegative values stays nonnegative
    SaliencyMap::from_unnormalized(resized.mapv(|v| v.max(0.0) as f64))
}
