//! Quantitative evaluation: one-vs-rest AUC, accuracy, saliency agreement
//! metrics (KL / PCC / histogram intersection), paired significance tests,
//! and the report type that bundles them for serialization.
//!
//! Conventions chosen where the literature varies: the overall AUC is the
//! unweighted (macro) mean of the defined per-class AUCs; histogram
//! similarity is the intersection Σ min(P, T) of the two normalized maps;
//! PCC is computed on the normalized distributions (Pearson is affine
//! invariant, so normalization does not change it); "mean ± std" uses the
//! sample standard deviation (n−1).

pub mod gradcam;

pub use gradcam::gradcam;

use crate::data::{ClassLabel, SaliencyMap};
use crate::losses::kl_divergence;
use crate::{Error, Result, NUM_CLASSES};
use ndarray::{Array2, ArrayView2};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::fmt::Write as _;

/// Per-class one-vs-rest AUCs plus their unweighted mean. A class absent
/// from the labels has an undefined AUC (`None`) and is excluded from the
/// macro average.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AucResult {
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub macro_auc: Option<f64>,
}

/// One-vs-rest ROC AUC for each class via the Mann–Whitney rank statistic
/// (ties credited 0.5), on an n×3 probability matrix.
pub fn multiclass_auc(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<AucResult> {
    let (n, c) = scores.dim();
    if c != NUM_CLASSES {
        return Err(Error::Shape(format!("expected {NUM_CLASSES} score columns, got {c}")));
    }
    if labels.len() != n {
        return Err(Error::Validation(format!("{} labels for {n} score rows", labels.len())));
    }
    if n < 2 {
        return Err(Error::Validation(format!("AUC needs at least 2 samples, got {n}")));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::Validation(format!("label {bad} out of range")));
    }

    let mut per_class = [None; NUM_CLASSES];
    for (class, slot) in per_class.iter_mut().enumerate() {
        let col: Vec<f64> = scores.column(class).iter().copied().collect();
        let is_pos: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        *slot = binary_auc(&col, &is_pos);
        if slot.is_none() {
            log::warn!(
                "class {class} has no positives or no negatives; its AUC is undefined \
                 and excluded from the macro average"
            );
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok(AucResult { per_class, macro_auc })
}

/// Binary ROC AUC by midrank summation; `None` when either group is empty.
fn binary_auc(scores: &[f64], is_pos: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            rank[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = rank
        .iter()
        .zip(is_pos)
        .filter(|(_, &p)| p)
        .map(|(&r, _)| r)
        .sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Fraction of exactly matching predictions.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(Error::Validation(format!(
            "accuracy needs equal nonempty vectors, got {} vs {}",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Index of the row maximum; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Agreement between a predicted and a ground-truth saliency map.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SaliencyScores {
    /// KL(target ‖ predicted), same convention as the training loss.
    pub kl: f64,
    /// Pearson correlation over flattened pixels; undefined for constant maps.
    pub pcc: Option<f64>,
    /// Histogram intersection Σ min(Pᵢ, Tᵢ) ∈ [0, 1].
    pub hs: f64,
}

/// All three saliency metrics for one predicted/target pair.
pub fn saliency_metrics(predicted: &SaliencyMap, target: &SaliencyMap) -> Result<SaliencyScores> {
    let p = predicted.weights();
    let t = target.weights();
    let kl = kl_divergence(p, t, 1e-8)?;
    let pcc = pearson(p, t);
    let hs = p.iter().zip(t.iter()).map(|(&a, &b)| a.min(b)).sum::<f64>();
    Ok(SaliencyScores { kl, pcc, hs })
}

/// Pearson correlation over all entries; `None` when either grid is
/// constant (zero variance makes the coefficient undefined).
pub fn pearson(a: &Array2<f64>, b: &Array2<f64>) -> Option<f64> {
    assert_eq!(a.dim(), b.dim(), "pearson inputs must share a shape");
    let n = a.len() as f64;
    let constant = |m: &Array2<f64>| {
        let first = m[[0, 0]];
        m.iter().all(|&v| v == first)
    };
    if constant(a) || constant(b) {
        return None;
    }
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut var_a = 0.0f64;
    let mut var_b = 0.0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        cov += dx * dy;
        var_a += dx * dx;
        var_b += dy * dy;
    }
    if var_a == 0.0 || var_b == 0.0 {
        return None;
    }
    Some(cov / (var_a.sqrt() * var_b.sqrt()))
}

/// Two-sided paired t-test outcome.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
    /// Set when the differences have zero variance but a nonzero mean;
    /// `t` is then ±∞ and `p` is 0 by convention.
    pub degenerate: bool,
}

/// Two-sided paired t-test on per-image values; the statistic is computed
/// on the differences a − b with n−1 degrees of freedom.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Validation(format!(
            "paired t-test needs two equal series of length ≥ 2, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let ss: f64 = diffs.iter().map(|&d| (d - mean) * (d - mean)).sum();
    let dof = n - 1.0;
    if ss == 0.0 {
        if mean == 0.0 {
            return Ok(TTestResult { t: 0.0, dof, p: 1.0, degenerate: false });
        }
        // identical nonzero differences: the statistic diverges
        let t = if mean > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        return Ok(TTestResult { t, dof, p: 0.0, degenerate: true });
    }
    let std = (ss / dof).sqrt();
    let t = mean / (std / n.sqrt());
    let dist = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::Validation(format!("t-distribution setup failed: {e}")))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTestResult { t, dof, p, degenerate: false })
}

/// Mean and sample standard deviation (n−1) of a value series.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// `None` for an empty series; a single value has std 0.
pub fn aggregate(values: &[f64]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let ss: f64 = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(Aggregate { mean, std, n })
}

/// One evaluated image: classification outputs plus saliency agreement
/// when a ground-truth map was available.
#[derive(Debug, Clone, Serialize)]
pub struct PerImageRecord {
    pub image_path: String,
    pub true_label: ClassLabel,
    pub pred_label: ClassLabel,
    pub probs: [f64; NUM_CLASSES],
    pub saliency: Option<SaliencyScores>,
}

/// Mean ± std aggregates of the saliency metrics over the images that had
/// ground-truth maps. PCC aggregates only the defined coefficients.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SaliencyAggregates {
    pub kl: Aggregate,
    pub pcc: Option<Aggregate>,
    pub hs: Aggregate,
}

/// One paired-t-test comparison against a named baseline.
#[derive(Debug, Clone, Serialize)]
pub struct SignificanceEntry {
    pub metric: String,
    pub baseline: String,
    pub t: f64,
    pub dof: f64,
    pub p: f64,
    pub degenerate: bool,
}

/// Full evaluation outcome: classification metrics, saliency aggregates,
/// significance tests, and the per-image records they are computed from.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_class_auc: [Option<f64>; NUM_CLASSES],
    pub macro_auc: Option<f64>,
    pub accuracy: f64,
    pub n_images: usize,
    pub n_with_saliency: usize,
    pub saliency: Option<SaliencyAggregates>,
    pub significance: Vec<SignificanceEntry>,
    #[serde(skip)]
    pub per_image: Vec<PerImageRecord>,
}

impl EvalReport {
    /// Assemble a report from per-image records. AUC is left undefined
    /// (with a warning) when fewer than two images were evaluated.
    pub fn from_records(per_image: Vec<PerImageRecord>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::Validation("cannot evaluate an empty record set".into()));
        }
        let labels: Vec<usize> = per_image.iter().map(|r| r.true_label.index()).collect();
        let preds: Vec<usize> = per_image.iter().map(|r| r.pred_label.index()).collect();
        let (per_class_auc, macro_auc) = if per_image.len() >= 2 {
            let mut scores = Array2::<f64>::zeros((per_image.len(), NUM_CLASSES));
            for (i, r) in per_image.iter().enumerate() {
                for (j, &p) in r.probs.iter().enumerate() {
                    scores[[i, j]] = p;
                }
            }
            let auc = multiclass_auc(scores.view(), &labels)?;
            (auc.per_class, auc.macro_auc)
        } else {
            log::warn!("fewer than 2 images: AUC undefined");
            ([None; NUM_CLASSES], None)
        };
        let accuracy = accuracy(&preds, &labels)?;

        let with_sal: Vec<&SaliencyScores> =
            per_image.iter().filter_map(|r| r.saliency.as_ref()).collect();
        let saliency = if with_sal.is_empty() {
            None
        } else {
            let kls: Vec<f64> = with_sal.iter().map(|s| s.kl).collect();
            let hss: Vec<f64> = with_sal.iter().map(|s| s.hs).collect();
            let pccs: Vec<f64> = with_sal.iter().filter_map(|s| s.pcc).collect();
            Some(SaliencyAggregates {
                kl: aggregate(&kls).expect("nonempty"),
                pcc: aggregate(&pccs),
                hs: aggregate(&hss).expect("nonempty"),
            })
        };

        Ok(Self {
            per_class_auc,
            macro_auc,
            accuracy,
            n_images: per_image.len(),
            n_with_saliency: with_sal.len(),
            saliency,
            significance: Vec::new(),
            per_image,
        })
    }

    /// JSON form of the aggregate report (per-image records go to CSV).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Per-image records as CSV with empty fields for missing values.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::from("image_path,kl,pcc,hs,true_label,pred_label,p0,p1,p2\n");
        for r in &self.per_image {
            let (kl, pcc, hs) = match &r.saliency {
                Some(s) => (
                    s.kl.to_string(),
                    s.pcc.map(|v| v.to_string()).unwrap_or_default(),
                    s.hs.to_string(),
                ),
                None => (String::new(), String::new(), String::new()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                csv_field(&r.image_path),
                kl,
                pcc,
                hs,
                r.true_label,
                r.pred_label,
                r.probs[0],
                r.probs[1],
                r.probs[2],
            );
        }
        out
    }

    /// Aligned plain-text summary for terminals and logs.
    pub fn human_table(&self) -> String {
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "undefined".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {}", "images", self.n_images);
        for (i, auc) in self.per_class_auc.iter().enumerate() {
            let name = ClassLabel::from_index(i).expect("class index");
            let _ = writeln!(out, "{:<24} {}", format!("auc[{name}]"), fmt_opt(*auc));
        }
        let _ = writeln!(out, "{:<24} {}", "macro_auc", fmt_opt(self.macro_auc));
        let _ = writeln!(out, "{:<24} {:.4}", "accuracy", self.accuracy);
        if let Some(sal) = &self.saliency {
            let _ = writeln!(out, "{:<24} {}", "images_with_saliency", self.n_with_saliency);
            let _ = writeln!(out, "{:<24} {:.4} ± {:.4}", "kl", sal.kl.mean, sal.kl.std);
            match &sal.pcc {
                Some(a) => {
                    let _ = writeln!(out, "{:<24} {:.4} ± {:.4} (n={})", "pcc", a.mean, a.std, a.n);
                }
                None => {
                    let _ = writeln!(out, "{:<24} undefined", "pcc");
                }
            }
            let _ = writeln!(out, "{:<24} {:.4} ± {:.4}", "hs", sal.hs.mean, sal.hs.std);
        }
        for s in &self.significance {
            let _ = writeln!(
                out,
                "{:<24} t={:.4} dof={} p={:.3e}{}",
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

/// Quote a CSV field only when it contains a delimiter, quote, or newline.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') || s.contains('\n') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
