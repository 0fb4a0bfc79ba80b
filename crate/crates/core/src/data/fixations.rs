//! Fixation-list → saliency-map rasterization.

use super::{Fixation, SaliencyMap};
use crate::{Error, Result, CANON_H, CANON_W};
use ndarray::Array2;

/// Renders fixations as duration-weighted isotropic Gaussians on the
/// canonical 640×512 grid and normalizes the sum to 1.
///
/// Each fixation contributes `duration · exp(−((r−y)² + (c−x)²) / 2σ²)`;
/// the kernel separates into an outer product of row and column profiles,
/// so evaluation is O(H + W + H·W) per fixation.
pub fn rasterize_fixations(fixations: &[Fixation], sigma: f64) -> Result<SaliencyMap> {
    if fixations.is_empty() {
        return Err(Error::Validation(
            "cannot rasterize an empty fixation list".into(),
        ));
    }
    if !(sigma > 0.0) {
        return Err(Error::Validation(format!(
            "gaussian sigma must be positive, got {sigma}"
        )));
    }
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    let mut acc = Array2::<f64>::zeros((CANON_H, CANON_W));
    let mut row_profile = vec![0.0f64; CANON_H];
    let mut col_profile = vec![0.0f64; CANON_W];
    for fx in fixations {
        for (r, p) in row_profile.iter_mut().enumerate() {
            let d = r as f64 - fx.y;
            *p = (-d * d * inv_two_sigma_sq).exp();
        }
        for (c, p) in col_profile.iter_mut().enumerate() {
            let d = c as f64 - fx.x;
            *p = (-d * d * inv_two_sigma_sq).exp();
        }
        for (r, &rp) in row_profile.iter().enumerate() {
            let weight = fx.duration * rp;
            let mut row = acc.row_mut(r);
            let rs = row.as_slice_mut().expect("row is contiguous");
            for (a, &cp) in rs.iter_mut().zip(&col_profile) {
                *a += weight * cp;
            }
        }
    }
    SaliencyMap::from_unnormalized(acc)
}
