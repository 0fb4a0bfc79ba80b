//! Dataset ingestion and preprocessing.
//!
//! The pipeline is manifest-driven: a JSON-Lines file enumerates images,
//! diagnosis labels, optional gaze-saliency maps and the train/val/test
//! split. Images are normalized to a canonical 640×512 single-channel
//! tensor; saliency maps to a probability grid summing to 1. A deterministic
//! synthetic generator produces desk-scale datasets with known
//! discriminative structure for tests and demos.

mod cache;
mod fixations;
mod manifest;
mod pngio;
mod preprocess;
mod synth;
mod triplet;

pub use cache::load_canonical_image;
pub use fixations::rasterize_fixations;
pub use manifest::{load_manifest, Manifest};
pub use pngio::{load_image_grid, load_saliency_png, save_saliency_png, save_u16_png};
pub use preprocess::{pad_to_aspect, preprocess_image, preprocess_saliency_grid};
pub use synth::{generate_synthetic_dataset, load_synth_meta, SynthMeta};
pub use triplet::sample_triplet_indices;

use crate::{Error, Result, CANON_H, CANON_W};
use ndarray::Array2;
use std::path::PathBuf;

/// Diagnosis classes, in the fixed index order used by every classifier
/// head and metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    Normal = 0,
    HeartFailure = 1,
    Pneumonia = 2,
}

impl serde::Serialize for ClassLabel {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 3] = [
        ClassLabel::Normal,
        ClassLabel::HeartFailure,
        ClassLabel::Pneumonia,
    ];

    /// Accepts the canonical names plus the common "chf" shorthand.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ClassLabel::Normal),
            "heart_failure" | "chf" => Ok(ClassLabel::HeartFailure),
            "pneumonia" => Ok(ClassLabel::Pneumonia),
            other => Err(Error::Validation(format!(
                "unknown label {other:?}; expected one of normal, heart_failure, pneumonia"
            ))),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Validation(format!("class index {i} out of range 0..3")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::Normal => "normal",
            ClassLabel::HeartFailure => "heart_failure",
            ClassLabel::Pneumonia => "pneumonia",
        }
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!(
                "unknown split {other:?}; expected train, val or test"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One dataset row. Paths are already resolved against the manifest's
/// directory; no pixel data is loaded until explicitly requested.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub image_path: PathBuf,
    pub label: ClassLabel,
    pub saliency_path: Option<PathBuf>,
    pub split: Split,
}

/// A preprocessed image: exactly 640×512, intensities in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalImage(Array2<f32>);

impl CanonicalImage {
    pub fn new(pixels: Array2<f32>) -> Result<Self> {
        if pixels.dim() != (CANON_H, CANON_W) {
            return Err(Error::Shape(format!(
                "canonical image must be {CANON_H}×{CANON_W}, got {}×{}",
                pixels.dim().0,
                pixels.dim().1
            )));
        }
        let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
        for &v in pixels.iter() {
            if !v.is_finite() {
                return Err(Error::Validation("canonical image has non-finite pixels".into()));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo < 0.0 || hi > 1.0 {
            return Err(Error::Validation(format!(
                "canonical image intensities must lie in [0,1], got [{lo}, {hi}]"
            )));
        }
        Ok(Self(pixels))
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.0
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.0
    }
}

/// A gaze-saliency distribution: nonnegative weights summing to 1 within
/// 1e-5. The canonical pipeline always produces 640×512 grids, but the type
/// admits any shape so the losses/metrics can be exercised on small grids.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap(Array2<f64>);

impl SaliencyMap {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        let mut sum = 0.0f64;
        for &v in weights.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(
                    "saliency weights must be finite and nonnegative".into(),
                ));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::Validation(format!(
                "saliency weights must sum to 1 (±1e-5), got {sum}"
            )));
        }
        Ok(Self(weights))
    }

    /// Renormalizes an arbitrary nonnegative grid to sum 1.
    pub fn from_unnormalized(weights: Array2<f64>) -> Result<Self> {
        let mut sum = 0.0f64;
        for &v in weights.iter() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Validation(
                    "saliency weights must be finite and nonnegative".into(),
                ));
            }
            sum += v;
        }
        if sum <= 0.0 {
            return Err(Error::Validation(
                "saliency map has zero total mass; cannot normalize".into(),
            ));
        }
        let mut w = weights;
        w.mapv_inplace(|v| v / sum);
        Ok(Self(w))
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_weights(self) -> Array2<f64> {
        self.0
    }
}

/// A single gaze dwell point in canonical-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fixation {
    /// Column, 0 ≤ x < 512.
    pub x: f64,
    /// Row, 0 ≤ y < 640.
    pub y: f64,
    /// Dwell time in seconds, > 0.
    pub duration: f64,
}

impl Fixation {
    pub fn new(x: f64, y: f64, duration: f64) -> Result<Self> {
        if !(0.0..CANON_W as f64).contains(&x) || !(0.0..CANON_H as f64).contains(&y) {
            return Err(Error::Validation(format!(
                "fixation ({x}, {y}) outside the {CANON_H}×{CANON_W} canonical frame"
            )));
        }
        if !(duration > 0.0) {
            return Err(Error::Validation(format!(
                "fixation duration must be positive, got {duration}"
            )));
        }
        Ok(Self { x, y, duration })
    }
}
