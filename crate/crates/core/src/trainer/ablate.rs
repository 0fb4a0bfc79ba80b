//! Ablation harness: trains the four architecture variants against the
//! full cooperative model on one manifest and compares them on the test
//! split.
//!
//! Classification arms: the backbone trained from scratch (`DNet201`)
//! versus contrastively pretrained (`DNet201-CL`) versus the full
//! dual-encoder model with the fusion head. Saliency arms: a plain UNet
//! (`UNet_S`) and the residual squeeze-and-excitation UNet alone
//! (`Res_SE-UNet`), both single-encoder, versus the dual-encoder saliency
//! branch of the full model. The expensive stage-1 chain is trained once
//! and shared: stage-1b checkpoints carry no saliency weights, so every
//! decoder variant can start from the same file.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{Manifest, Split};
use crate::eval::{paired_ttest, EvalReport, SignificanceEntry};
use crate::{Error, Result};

use super::evaluate::{evaluate_records, load_model, ClassifierKind, EvalSpec};
use super::{run_stage, ExpConfig, InitSource, SalStyle, StageKind};

/// One trained and evaluated variant.
#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub report: EvalReport,
}

/// All variants plus paired significance tests of the dual-encoder saliency
/// against each single-encoder baseline.
#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub significance: Vec<SignificanceEntry>,
}

impl AblationReport {
    /// Find a variant's report by name.
    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.name == name).map(|r| &r.report)
    }

    /// Aligned text table of the headline metrics per variant.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "—".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<28} {:>9} {:>9} {:>15} {:>15} {:>15}",
            "variant", "macro_auc", "accuracy", "kl", "pcc", "hs"
        );
        for row in &self.rows {
            let r = &row.report;
            let (kl, pcc, hs) = match &r.saliency {
                Some(s) => (
                    format!("{:.3} ± {:.3}", s.kl.mean, s.kl.std),
                    s.pcc
                        .map(|a| format!("{:.3} ± {:.3}", a.mean, a.std))
                        .unwrap_or_else(|| "—".into()),
                    format!("{:.3} ± {:.3}", s.hs.mean, s.hs.std),
                ),
                None => ("—".into(), "—".into(), "—".into()),
            };
            let _ = writeln!(
                out,
                "{:<28} {:>9} {:>9.4} {:>15} {:>15} {:>15}",
                row.name,
                fmt(r.macro_auc),
                r.accuracy,
                kl,
                pcc,
                hs
            );
        }
        for s in &self.significance {
            let _ = writeln!(
                out,
                "{:<28} t={:+.4} dof={} p={:.3e}{}",
                format!("{} vs {}", s.metric, s.baseline),
                s.t,
                s.dof,
                s.p,
                if s.degenerate { " (degenerate variance)" } else { "" }
            );
        }
        out
    }
}

pub const FULL: &str = "Full (dual-encoder)";
pub const DNET: &str = "DNet201";
pub const DNET_CL: &str = "DNet201-CL";
pub const UNET_S: &str = "UNet_S";
pub const RES_SE: &str = "Res_SE-UNet";

/// Paired saliency comparisons of the full model against one baseline,
/// matched per test image.
fn saliency_significance(
    full: &EvalReport,
    baseline: &EvalReport,
    baseline_name: &str,
) -> Result<Vec<SignificanceEntry>> {
    let mut entries = Vec::new();
    let pairs: Vec<(&crate::eval::SaliencyScores, &crate::eval::SaliencyScores)> = full
        .per_image
        .iter()
        .zip(baseline.per_image.iter())
        .filter_map(|(a, b)| match (&a.saliency, &b.saliency) {
            (Some(sa), Some(sb)) => Some((sa, sb)),
            _ => None,
        })
        .collect();
    if pairs.len() < 2 {
        return Ok(entries);
    }
    let mut push = |metric: &str, a: Vec<f64>, b: Vec<f64>| -> Result<()> {
        if a.len() < 2 || a.len() != b.len() {
            return Ok(());
        }
        let t = paired_ttest(&a, &b)?;
        entries.push(SignificanceEntry {
            metric: metric.to_string(),
            baseline: baseline_name.to_string(),
            t: t.t,
            dof: t.dof,
            p: t.p,
            degenerate: t.degenerate,
        });
        Ok(())
    };
    push(
        "kl",
        pairs.iter().map(|(a, _)| a.kl).collect(),
        pairs.iter().map(|(_, b)| b.kl).collect(),
    )?;
    push(
        "hs",
        pairs.iter().map(|(a, _)| a.hs).collect(),
        pairs.iter().map(|(_, b)| b.hs).collect(),
    )?;
    let pcc: Vec<(f64, f64)> = pairs
        .iter()
        .filter_map(|(a, b)| match (a.pcc, b.pcc) {
            (Some(x), Some(y)) => Some((x, y)),
            _ => None,
        })
        .collect();
    push(
        "pcc",
        pcc.iter().map(|&(x, _)| x).collect(),
        pcc.iter().map(|&(_, y)| y).collect(),
    )?;
    Ok(entries)
}

/// Train every variant and evaluate on the test split. The base
/// configuration describes the full model; single-encoder and plain-block
/// variants are derived from it. Artifacts land in per-variant
/// subdirectories of `work_dir`.
pub fn run_ablation(
    cfg: &ExpConfig,
    manifest: &Manifest,
    work_dir: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    let test: Vec<_> =
        manifest.records.iter().filter(|r| r.split == Split::Test).cloned().collect();
    if test.is_empty() {
        return Err(Error::Validation(
            "the ablation study needs a test split in the manifest".into(),
        ));
    }
    let test_sal: Vec<_> = test.iter().filter(|r| r.saliency_path.is_some()).cloned().collect();

    // full cooperative chain, trained once
    let shared = work_dir.join("full");
    run_stage(StageKind::Stage1a, cfg, manifest, &shared, InitSource::Auto)?;
    run_stage(StageKind::Stage1b, cfg, manifest, &shared, InitSource::Auto)?;
    run_stage(StageKind::Stage2, cfg, manifest, &shared, InitSource::Auto)?;
    run_stage(StageKind::Stage3, cfg, manifest, &shared, InitSource::Auto)?;
    let stage1b_ckpt = shared.join(StageKind::Stage1b.checkpoint_filename());

    // backbone without contrastive pretraining
    let scratch_dir = work_dir.join("no_pretrain");
    run_stage(StageKind::Stage1b, cfg, manifest, &scratch_dir, InitSource::Fresh)?;

    // single-encoder saliency variants, seeded from the shared stage-1b file
    let mut alone_cfg = cfg.clone();
    alone_cfg.dual_encoder = false;
    let alone_dir = work_dir.join("res_se_alone");
    run_stage(
        StageKind::Stage2,
        &alone_cfg,
        manifest,
        &alone_dir,
        InitSource::Path(stage1b_ckpt.clone()),
    )?;

    let mut unet_cfg = cfg.clone();
    unet_cfg.dual_encoder = false;
    unet_cfg.sal_style = SalStyle::Plain;
    let unet_dir = work_dir.join("unet_s");
    run_stage(
        StageKind::Stage2,
        &unet_cfg,
        manifest,
        &unet_dir,
        InitSource::Path(stage1b_ckpt.clone()),
    )?;

    // evaluation
    let mut rows = Vec::new();

    let (set, _) = load_model(
        cfg,
        &scratch_dir.join(StageKind::Stage1b.checkpoint_filename()),
        StageKind::Stage1b,
    )?;
    rows.push(AblationRow {
        name: DNET.into(),
        report: evaluate_records(
            &set,
            cfg,
            &test,
            EvalSpec { classifier: ClassifierKind::Backbone, with_saliency: false },
        )?,
    });

    let (set, _) = load_model(cfg, &stage1b_ckpt, StageKind::Stage1b)?;
    rows.push(AblationRow {
        name: DNET_CL.into(),
        report: evaluate_records(
            &set,
            cfg,
            &test,
            EvalSpec { classifier: ClassifierKind::Backbone, with_saliency: false },
        )?,
    });

    let (set, _) = load_model(
        &unet_cfg,
        &unet_dir.join(StageKind::Stage2.checkpoint_filename()),
        StageKind::Stage2,
    )?;
    rows.push(AblationRow {
        name: UNET_S.into(),
        report: evaluate_records(
            &set,
            &unet_cfg,
            &test_sal,
            EvalSpec { classifier: ClassifierKind::Backbone, with_saliency: true },
        )?,
    });

    let (set, _) = load_model(
        &alone_cfg,
        &alone_dir.join(StageKind::Stage2.checkpoint_filename()),
        StageKind::Stage2,
    )?;
    rows.push(AblationRow {
        name: RES_SE.into(),
        report: evaluate_records(
            &set,
            &alone_cfg,
            &test_sal,
            EvalSpec { classifier: ClassifierKind::Backbone, with_saliency: true },
        )?,
    });

    let (set, _) = load_model(
        cfg,
        &shared.join(StageKind::Stage3.checkpoint_filename()),
        StageKind::Stage3,
    )?;
    // classification over the whole test split…
    let full_cls = evaluate_records(
        &set,
        cfg,
        &test,
        EvalSpec { classifier: ClassifierKind::Fusion, with_saliency: false },
    )?;
    // …and saliency over the gaze-annotated subset, aligned with the
    // baselines for the paired tests
    let full_sal = evaluate_records(
        &set,
        cfg,
        &test_sal,
        EvalSpec { classifier: ClassifierKind::Fusion, with_saliency: true },
    )?;

    let mut significance = Vec::new();
    for (name, report) in
        [(UNET_S, rows[2].report.clone()), (RES_SE, rows[3].report.clone())]
    {
        significance.extend(saliency_significance(&full_sal, &report, name)?);
    }
    let mut full_report = EvalReport {
        saliency: full_sal.saliency,
        n_with_saliency: full_sal.n_with_saliency,
        ..full_cls
    };
    full_report.significance = significance.clone();
    rows.push(AblationRow { name: FULL.into(), report: full_report });

    Ok(AblationReport { rows, significance })
}
