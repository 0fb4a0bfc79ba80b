//! Dataset-level evaluation: run a trained model set over a record list and
//! assemble the metric report consumed by the CLI and the ablation harness.

use std::path::Path;

use ndarray::{s, Array2};

use crate::data::{ImageRecord, SaliencyMap};
use crate::eval::{argmax, saliency_metrics, EvalReport, PerImageRecord};
use crate::losses::softmax_rows;
use crate::{ClassLabel, Error, Result};

use super::checkpoint::{load_checkpoint, CheckpointMeta};
use super::{apply_params, load_plane, load_target, stack_planes};
use super::{ExpConfig, ModelSet, StageKind};

/// Which classification head produces the probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// The stage-3 fusion head over pooled backbone and decoder features.
    Fusion,
    /// The stage-1b classification head on the backbone alone.
    Backbone,
}

/// What to evaluate.
#[derive(Debug, Clone, Copy)]
pub struct EvalSpec {
    pub classifier: ClassifierKind,
    /// Score predicted saliency against ground-truth maps where available.
    pub with_saliency: bool,
}

/// Rebuild a model set from its configuration and a checkpoint, verifying
/// the stage and architecture recorded in the archive.
pub fn load_model(
    cfg: &ExpConfig,
    checkpoint: &Path,
    expected_stage: StageKind,
) -> Result<(ModelSet, CheckpointMeta)> {
    if !checkpoint.exists() {
        return Err(Error::MissingDependency(format!(
            "checkpoint {} not found — run {expected_stage} first",
            checkpoint.display()
        )));
    }
    let (meta, params) = load_checkpoint(checkpoint)?;
    if meta.stage != expected_stage {
        return Err(Error::Validation(format!(
            "checkpoint {} was written by {}, expected {expected_stage}",
            checkpoint.display(),
            meta.stage
        )));
    }
    if meta.arch_digest != cfg.arch_digest(expected_stage) {
        return Err(Error::Validation(format!(
            "checkpoint {} was trained under an incompatible architecture configuration",
            checkpoint.display()
        )));
    }
    let mut set = ModelSet::from_config(cfg)?;
    apply_params(&mut set, &params)?;
    Ok((set, meta))
}

/// Evaluate `records` and assemble the report. Images run through the
/// network in evaluation mode at the configured input scale; gaze maps are
/// compared at that same scale.
pub fn evaluate_records(
    set: &ModelSet,
    cfg: &ExpConfig,
    records: &[ImageRecord],
    spec: EvalSpec,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty record set".into()));
    }
    let dims = cfg.input_dims();
    let batch = cfg.batch_size.max(1);
    let mut per_image = Vec::with_capacity(records.len());

    let mut start = 0usize;
    while start < records.len() {
        let end = (start + batch).min(records.len());
        let chunk = &records[start..end];
        let planes: Vec<Array2<f32>> =
            chunk.iter().map(|r| load_plane(r, dims)).collect::<Result<_>>()?;
        let refs: Vec<&Array2<f32>> = planes.iter().collect();
        let x = stack_planes(&refs);

        let needs_backbone = spec.classifier == ClassifierKind::Fusion
            || (spec.with_saliency && cfg.dual_encoder);
        let bb = if needs_backbone {
            Some(set.backbone.forward_features(x.view())?)
        } else {
            None
        };
        let sal_bb = if cfg.dual_encoder { bb.as_ref().map(|b| b.view()) } else { None };

        let logits = match spec.classifier {
            ClassifierKind::Backbone => set.backbone.forward_class_logits(x.view())?,
            ClassifierKind::Fusion => {
                let bb = bb.as_ref().expect("backbone features computed for the fusion head");
                let dec = set.salnet.forward_decoder_features(x.view(), sal_bb)?;
                set.fusion.forward_eval(bb.view(), dec.view())?
            }
        };
        let probs = softmax_rows(logits.mapv(f64::from).view());

        let maps = if spec.with_saliency && chunk.iter().any(|r| r.saliency_path.is_some()) {
            Some(set.salnet.forward_saliency(x.view(), sal_bb)?)
        } else {
            None
        };

        for (bi, record) in chunk.iter().enumerate() {
            let row: Vec<f64> = probs.slice(s![bi, ..]).to_vec();
            let pred = argmax(&row);
            let saliency = match (&maps, &record.saliency_path) {
                (Some(maps), Some(_)) => {
                    let target = SaliencyMap::new(load_target(record, dims)?)?;
                    Some(saliency_metrics(&maps[bi], &target)?)
                }
                _ => None,
            };
            per_image.push(PerImageRecord {
                image_path: record.image_path.display().to_string(),
                true_label: record.label,
                pred_label: ClassLabel::from_index(pred)?,
                probs: [row[0], row[1], row[2]],
                saliency,
            });
        }
        start = end;
    }
    EvalReport::from_records(per_image)
}
