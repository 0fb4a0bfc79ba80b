//! Joint chest X-ray diagnosis and radiological gaze-saliency prediction.
//!
//! The crate implements a dual-encoder multi-task pipeline trained with a
//! staged cooperative schedule:
//!
//! 1. **Stage 1a/1b** — a DenseNet-201 image encoder is pretrained with a
//!    contrastive triplet loss, then finetuned for 3-class diagnosis
//!    (normal / heart failure / pneumonia) with cross-entropy.
//! 2. **Stage 2** — a residual squeeze-and-excitation UNet predicts a gaze
//!    saliency distribution over the image; the frozen backbone's features
//!    are fused into the UNet bottleneck (dual-encoder fusion). Trained with
//!    a KL-divergence loss.
//! 3. **Stage 3** — a small classifier consumes pooled backbone features
//!    concatenated with the UNet's last decoder features; everything
//!    upstream stays frozen.
//!
//! Supporting machinery: a deterministic CPU tensor/NN layer library
//! ([`nn`]), the data pipeline (manifests, preprocessing, fixation
//! rasterization, synthetic data), the loss functions, the metric suite
//! (multiclass AUC, accuracy, KL/PCC/HS, paired t-tests, GradCAM), staged
//! training with early stopping and checkpointing, and an ablation harness.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod nn;
pub mod trainer;

pub use data::{CanonicalImage, ClassLabel, Fixation, ImageRecord, SaliencyMap, Split};
pub use error::{Error, Result};
pub use models::{
    BackboneConfig, BlockStyle, DenseNetBackbone, FusionConfig, FusionHead, SalNetConfig,
    SaliencyNet,
};
pub use trainer::{run_stage, ExpConfig, InitSource, ModelSet, StageKind, StageOutcome};

/// Canonical image height after preprocessing.
pub const CANON_H: usize = 640;
/// Canonical image width after preprocessing.
pub const CANON_W: usize = 512;
/// Number of diagnosis classes.
pub const NUM_CLASSES: usize = 3;
