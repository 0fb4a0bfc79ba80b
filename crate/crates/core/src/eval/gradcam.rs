//! Class activation mapping for the classification backbone.
//!
//! The classifier ends in global average pooling followed by a single linear
//! layer, so the gradient of a class logit with respect to the last feature
//! map is constant over space and the usual gradient-averaged channel
//! weights reduce analytically to that class's row of the classifier weight
//! matrix (scaled by 1/HW). The map is therefore computed directly: weight
//! the rectified final activations per channel, rectify the sum, upsample to
//! the canonical frame, and scale the peak to one for overlay rendering.

use crate::data::CanonicalImage;
use crate::models::DenseNetBackbone;
use crate::nn::pool::bilinear_resize_plane;
use crate::{Error, Result, CANON_H, CANON_W, NUM_CLASSES};
use ndarray::{Array2, Array4};

/// Class evidence map at canonical resolution, values in [0, 1].
///
/// `class_index` selects which logit to explain; `None` explains the
/// predicted (argmax) class. A class whose weighted activations are nowhere
/// positive yields an all-zero map rather than a rescaled noise floor.
pub fn gradcam(
    model: &DenseNetBackbone,
    image: &CanonicalImage,
    class_index: Option<usize>,
) -> Result<Array2<f32>> {
    if let Some(k) = class_index {
        if k >= NUM_CLASSES {
            return Err(Error::Validation(format!(
                "class index {k} out of range (have {NUM_CLASSES} classes)"
            )));
        }
    }

    let pixels = image.pixels();
    let (h, w) = pixels.dim();
    let mut batch = Array4::<f32>::zeros((1, 1, h, w));
    batch.slice_mut(ndarray::s![0, 0, .., ..]).assign(pixels);

    let (acts, logits) = model.forward_final_activations(batch.view())?;
    let class = class_index.unwrap_or_else(|| {
        let row = logits.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    });

    let (_, channels, gh, gw) = acts.dim();
    let norm = 1.0 / (gh * gw) as f64;
    let weights = model.cls_weight();
    let mut cam = Array2::<f64>::zeros((gh, gw));
    for c in 0..channels {
        let alpha = weights[[class, c]] as f64 * norm;
        let plane = acts.slice(ndarray::s![0, c, .., ..]);
        cam.zip_mut_with(&plane, |acc, &a| *acc += alpha * a as f64);
    }
    cam.mapv_inplace(|v| v.max(0.0));

    let coarse = cam.mapv(|v| v as f32);
    let mut full = bilinear_resize_plane(&coarse, CANON_H, CANON_W);
    let peak = full.iter().cloned().fold(0.0f32, f32::max);
    if peak > 0.0 {
        full.mapv_inplace(|v| (v / peak).clamp(0.0, 1.0));
    }
    Ok(full)
}
