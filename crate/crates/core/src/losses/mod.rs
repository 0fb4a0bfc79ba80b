//! Training objectives: triplet contrastive loss, cross-entropy, and
//! saliency KL divergence.
//!
//! All three are implemented once in f64 with analytic gradients; the
//! trainer feeds them f64 copies of its f32 activations and casts the
//! gradients back, so the training losses and the evaluation metrics share
//! a single numerical definition.

use crate::{Error, Result};
use ndarray::{Array2, ArrayView2};

/// Loss hyperparameters. Natural logarithms throughout.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Triplet hinge margin on the unit-embedding scale.
    pub triplet_margin: f64,
    /// Added inside the predicted-map logarithm only.
    pub kl_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            triplet_margin: 0.2,
            kl_epsilon: 1e-8,
        }
    }
}

/// Mean hinge loss max(0, d²(a,p) − d²(a,n) + margin) over a batch of
/// embedding triples. Inputs must be unit-norm within 1e-4 (catching a
/// missing normalization layer); use [`triplet_loss_raw`] for unnormalized
/// toy inputs.
pub fn triplet_loss(
    anchor: ArrayView2<'_, f64>,
    positive: ArrayView2<'_, f64>,
    negative: ArrayView2<'_, f64>,
    margin: f64,
) -> Result<f64> {
    for (name, e) in [("anchor", &anchor), ("positive", &positive), ("negative", &negative)] {
        for row in e.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-4 {
                return Err(Error::Validation(format!(
                    "{name} embedding has norm {norm}, expected unit norm (±1e-4)"
                )));
            }
        }
    }
    Ok(triplet_loss_raw(anchor, positive, negative, margin))
}

/// The hinge formula without the unit-norm precondition.
pub fn triplet_loss_raw(
    anchor: ArrayView2<'_, f64>,
    positive: ArrayView2<'_, f64>,
    negative: ArrayView2<'_, f64>,
    margin: f64,
) -> f64 {
    let n = anchor.nrows();
    assert_eq!(positive.nrows(), n);
    assert_eq!(negative.nrows(), n);
    let mut total = 0.0f64;
    for i in 0..n {
        let dap: f64 = anchor
            .row(i)
            .iter()
            .zip(positive.row(i).iter())
            .map(|(a, p)| (a - p) * (a - p))
            .sum();
        let dan: f64 = anchor
            .row(i)
            .iter()
            .zip(negative.row(i).iter())
            .map(|(a, q)| (a - q) * (a - q))
            .sum();
        total += (dap - dan + margin).max(0.0);
    }
    total / n as f64
}

/// Loss value plus analytic gradients with respect to all three embedding
/// batches. At the hinge kink (exactly zero) the subgradient 0 is used.
pub fn triplet_loss_grad(
    anchor: ArrayView2<'_, f64>,
    positive: ArrayView2<'_, f64>,
    negative: ArrayView2<'_, f64>,
    margin: f64,
) -> (f64, Array2<f64>, Array2<f64>, Array2<f64>) {
    let n = anchor.nrows();
    let d = anchor.ncols();
    let mut da = Array2::<f64>::zeros((n, d));
    let mut dp = Array2::<f64>::zeros((n, d));
    let mut dn = Array2::<f64>::zeros((n, d));
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let mut dap = 0.0;
        let mut dan = 0.0;
        for j in 0..d {
            let ap = anchor[[i, j]] - positive[[i, j]];
            let an = anchor[[i, j]] - negative[[i, j]];
            dap += ap * ap;
            dan += an * an;
        }
        let h = dap - dan + margin;
        if h > 0.0 {
            total += h;
            for j in 0..d {
                // ∂h/∂a = 2(a−p) − 2(a−n), ∂h/∂p = −2(a−p), ∂h/∂n = 2(a−n)
                let ap = anchor[[i, j]] - positive[[i, j]];
                let an = anchor[[i, j]] - negative[[i, j]];
                da[[i, j]] = 2.0 * (ap - an) * inv_n;
                dp[[i, j]] = -2.0 * ap * inv_n;
                dn[[i, j]] = 2.0 * an * inv_n;
            }
        }
    }
    (total * inv_n, da, dp, dn)
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut total = 0.0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::Validation(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        total += logsum - logits[[i, label]];
    }
    Ok(total / n as f64)
}

/// Loss value plus the analytic gradient (softmax − one-hot)/n.
pub fn cross_entropy_grad(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let loss = cross_entropy(logits, labels)?;
    let (n, c) = logits.dim();
    let inv_n = 1.0 / n as f64;
    let mut grad = Array2::<f64>::zeros((n, c));
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for j in 0..c {
            let p = (logits[[i, j]] - max).exp() / sum;
            grad[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((loss, grad))
}

/// Row-wise softmax of a logit batch, for callers that need probabilities.
pub fn softmax_rows(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, c) = logits.dim();
    let mut out = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..c {
            let e = (logits[[i, j]] - max).exp();
            out[[i, j]] = e;
            sum += e;
        }
        for j in 0..c {
            out[[i, j]] /= sum;
        }
    }
    out
}

fn validate_distribution(name: &str, grid: &Array2<f64>) -> Result<()> {
    let mut sum = 0.0f64;
    for &v in grid.iter() {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Validation(format!(
                "{name} map has a negative or non-finite entry"
            )));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-4 {
        return Err(Error::Validation(format!(
            "{name} map sums to {sum}, expected 1 (±1e-4)"
        )));
    }
    Ok(())
}

/// KL divergence Σ T·ln(T/(P+ε)) for one predicted/target pair, with
/// 0·ln(0/x) ≡ 0. Direction: KL(target ‖ predicted).
pub fn kl_divergence(predicted: &Array2<f64>, target: &Array2<f64>, epsilon: f64) -> Result<f64> {
    if predicted.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "KL inputs differ in shape: {:?} vs {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    validate_distribution("predicted", predicted)?;
    validate_distribution("target", target)?;
    let mut total = 0.0f64;
    for (&p, &t) in predicted.iter().zip(target.iter()) {
        if t > 0.0 {
            total += t * (t / (p + epsilon)).ln();
        }
    }
    Ok(total)
}

/// Mean KL divergence over a batch of pairs.
pub fn kl_saliency_loss(
    predicted: &[Array2<f64>],
    target: &[Array2<f64>],
    epsilon: f64,
) -> Result<f64> {
    if predicted.len() != target.len() || predicted.is_empty() {
        return Err(Error::Validation(format!(
            "KL batch sizes differ or are empty: {} vs {}",
            predicted.len(),
            target.len()
        )));
    }
    let mut total = 0.0f64;
    for (p, t) in predicted.iter().zip(target) {
        total += kl_divergence(p, t, epsilon)?;
    }
    Ok(total / predicted.len() as f64)
}

/// Analytic gradient of [`kl_divergence`] with respect to the predicted
/// map: ∂/∂Pᵢ = −Tᵢ/(Pᵢ+ε).
pub fn kl_divergence_grad_wrt_predicted(
    predicted: &Array2<f64>,
    target: &Array2<f64>,
    epsilon: f64,
) -> Array2<f64> {
    let mut grad = Array2::<f64>::zeros(predicted.raw_dim());
    for ((g, &p), &t) in grad.iter_mut().zip(predicted.iter()).zip(target.iter()) {
        if t > 0.0 {
            *g = -t / (p + epsilon);
        }
    }
    grad
}

/// Gradient of the KL loss with respect to the *logits* behind a spatial
/// softmax P = softmax(z): ∂L/∂zᵢ = Pᵢ·S − Tᵢ·Pᵢ/(Pᵢ+ε) with
/// S = Σⱼ Tⱼ·Pⱼ/(Pⱼ+ε). As ε→0 this is the familiar P − T.
pub fn kl_softmax_logit_grad(
    predicted: &Array2<f64>,
    target: &Array2<f64>,
    epsilon: f64,
) -> Array2<f64> {
    let mut s = 0.0f64;
    for (&p, &t) in predicted.iter().zip(target.iter()) {
        if t > 0.0 {
            s += t * p / (p + epsilon);
        }
    }
    let mut grad = Array2::<f64>::zeros(predicted.raw_dim());
    for ((g, &p), &t) in grad.iter_mut().zip(predicted.iter()).zip(target.iter()) {
        let pull = if t > 0.0 { t * p / (p + epsilon) } else { 0.0 };
        *g = p * s - pull;
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0f64..1.0));
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / norm);
        }
        m
    }

    #[test]
    fn satisfied_triplet_has_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = unit_rows(4, 8, &mut rng);
        let p = a.clone();
        // negatives far away: negate the anchors → d² = 4 ≥ margin
        let n = a.mapv(|v| -v);
        let loss = triplet_loss(a.view(), p.view(), n.view(), 0.2).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn collapsed_triplet_pays_the_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = unit_rows(3, 5, &mut rng);
        let loss = triplet_loss(a.view(), a.view(), a.view(), 0.2).unwrap();
        assert!((loss - 0.2).abs() < 1e-12);
    }

    #[test]
    fn one_dimensional_hinge_arithmetic() {
        // raw variant: embeddings deliberately not unit-norm
        let a = array![[0.0]];
        let p = array![[1.0]];
        let n = array![[2.0]];
        assert_eq!(triplet_loss_raw(a.view(), p.view(), n.view(), 0.2), 0.0);
        let p2 = array![[2.0]];
        let n2 = array![[1.0]];
        let loss = triplet_loss_raw(a.view(), p2.view(), n2.view(), 0.2);
        assert!((loss - 3.2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn non_unit_inputs_are_rejected() {
        let a = array![[0.5, 0.0]];
        let u = array![[1.0, 0.0]];
        assert!(triplet_loss(a.view(), u.view(), u.view(), 0.2).is_err());
        assert!(triplet_loss(u.view(), u.view(), u.view(), 0.2).is_ok());
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps = 1e-6;
        for _ in 0..100 {
            let a = unit_rows(2, 4, &mut rng);
            let p = unit_rows(2, 4, &mut rng);
            let n = unit_rows(2, 4, &mut rng);
            // keep a safety band around the hinge kink so central
            // differences stay one-sided
            let near_kink = (0..2).any(|i| {
                let dap: f64 = (0..4).map(|j| (a[[i, j]] - p[[i, j]]).powi(2)).sum();
                let dan: f64 = (0..4).map(|j| (a[[i, j]] - n[[i, j]]).powi(2)).sum();
                (dap - dan + 0.2).abs() < 1e-3
            });
            if near_kink {
                continue;
            }
            let (_, da, dp, dn) = triplet_loss_grad(a.view(), p.view(), n.view(), 0.2);
            for (target, analytic) in [(&a, &da), (&p, &dp), (&n, &dn)] {
                for i in 0..2 {
                    for j in 0..4 {
                        let mut plus = target.clone();
                        plus[[i, j]] += eps;
                        let mut minus = target.clone();
                        minus[[i, j]] -= eps;
                        let (lp, lm) = if std::ptr::eq(target, &a) {
                            (
                                triplet_loss_raw(plus.view(), p.view(), n.view(), 0.2),
                                triplet_loss_raw(minus.view(), p.view(), n.view(), 0.2),
                            )
                        } else if std::ptr::eq(target, &p) {
                            (
                                triplet_loss_raw(a.view(), plus.view(), n.view(), 0.2),
                                triplet_loss_raw(a.view(), minus.view(), n.view(), 0.2),
                            )
                        } else {
                            (
                                triplet_loss_raw(a.view(), p.view(), plus.view(), 0.2),
                                triplet_loss_raw(a.view(), p.view(), minus.view(), 0.2),
                            )
                        };
                        let fd = (lp - lm) / (2.0 * eps);
                        let an = analytic[[i, j]];
                        let denom = fd.abs().max(an.abs()).max(1e-8);
                        assert!(
                            ((an - fd) / denom).abs() < 1e-4,
                            "triplet grad mismatch: {an} vs {fd}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln3() {
        for c in [-5.0, 0.0, 17.3] {
            let logits = array![[c, c, c]];
            let loss = cross_entropy(logits.view(), &[1]).unwrap();
            assert!((loss - 3.0f64.ln()).abs() < 1e-6, "{loss}");
        }
    }

    #[test]
    fn saturated_true_logit_drives_loss_to_zero() {
        let logits = array![[20.0, 0.0, 0.0]];
        let loss = cross_entropy(logits.view(), &[0]).unwrap();
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn direct_softmax_arithmetic_example() {
        let logits = array![[1.0, 0.0, 0.0]];
        let loss = cross_entropy(logits.view(), &[0]).unwrap();
        let expected = (1.0 + 2.0 / std::f64::consts::E).ln();
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
        assert!((expected - 0.5514).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let logits = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-4.0f64..4.0));
            let shift = rng.gen_range(-100.0f64..100.0);
            let shifted = logits.mapv(|v| v + shift);
            let labels = [0usize, 1, 2];
            let l1 = cross_entropy(logits.view(), &labels).unwrap();
            let l2 = cross_entropy(shifted.view(), &labels).unwrap();
            assert!((l1 - l2).abs() < 1e-9, "{l1} vs {l2}");
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = array![[0.0, 0.0, 0.0]];
        assert!(cross_entropy(logits.view(), &[3]).is_err());
        assert!(cross_entropy(logits.view(), &[0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = 1e-6;
        for _ in 0..100 {
            let logits = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-3.0f64..3.0));
            let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..3)).collect();
            let (_, grad) = cross_entropy_grad(logits.view(), &labels).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = logits.clone();
                    plus[[i, j]] += eps;
                    let mut minus = logits.clone();
                    minus[[i, j]] -= eps;
                    let fd = (cross_entropy(plus.view(), &labels).unwrap()
                        - cross_entropy(minus.view(), &labels).unwrap())
                        / (2.0 * eps);
                    let an = grad[[i, j]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(((an - fd) / denom).abs() < 1e-4, "{an} vs {fd}");
                }
            }
        }
    }

    fn random_distribution(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let mut m = Array2::from_shape_simple_fn((h, w), || rng.gen_range(0.01f64..1.0));
        let sum: f64 = m.iter().sum();
        m.mapv_inplace(|v| v / sum);
        m
    }

    #[test]
    fn kl_identity_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_distribution(8, 8, &mut rng);
        let kl = kl_divergence(&t.clone(), &t, 1e-8).unwrap();
        assert!(kl.abs() < 1e-6, "{kl}");
    }

    #[test]
    fn two_pixel_toy_value() {
        let p = array![[0.25, 0.75]];
        let t = array![[0.5, 0.5]];
        let kl = kl_divergence(&p, &t, 1e-8).unwrap();
        let expected = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl - expected).abs() < 1e-6);
        assert!((kl - 0.1438).abs() < 1e-4, "{kl}");
    }

    #[test]
    fn delta_target_against_uniform_prediction() {
        let n = 640 * 512;
        let p = Array2::from_elem((640, 512), 1.0 / n as f64);
        let mut t = Array2::zeros((640, 512));
        t[[320, 256]] = 1.0;
        let kl = kl_divergence(&p, &t, 1e-8).unwrap();
        let exact = (1.0 / (1.0 / n as f64 + 1e-8)).ln();
        assert!((kl - exact).abs() < 1e-12);
        assert!((kl - (n as f64).ln()).abs() < 0.01, "{kl}");
    }

    #[test]
    fn kl_zero_iff_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_distribution(4, 4, &mut rng);
        let mut p = t.clone();
        p[[0, 0]] += 0.05;
        p[[3, 3]] -= 0.05;
        let kl = kl_divergence(&p, &t, 1e-8).unwrap();
        assert!(kl > 1e-4, "perturbed pair must have positive KL, got {kl}");
    }

    #[test]
    fn kl_rejects_invalid_inputs() {
        let t = array![[0.5, 0.5]];
        let negative = array![[-0.1, 1.1]];
        assert!(kl_divergence(&negative, &t, 1e-8).is_err());
        let not_normalized = array![[0.9, 0.9]];
        assert!(kl_divergence(&not_normalized, &t, 1e-8).is_err());
        let wrong_shape = array![[0.25], [0.75]];
        assert!(kl_divergence(&wrong_shape, &t, 1e-8).is_err());
    }

    #[test]
    fn kl_is_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = random_distribution(6, 5, &mut rng);
            let t = random_distribution(6, 5, &mut rng);
            let kl = kl_divergence(&p, &t, 1e-8).unwrap();
            assert!(kl > -1e-9, "{kl}");
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eps_fd = 1e-7;
        for _ in 0..100 {
            let p = random_distribution(3, 3, &mut rng);
            let t = random_distribution(3, 3, &mut rng);
            let grad = kl_divergence_grad_wrt_predicted(&p, &t, 1e-8);
            // perturbing a single pixel breaks normalization; evaluate the
            // raw functional (validation skipped) by symmetric perturbation
            // of the summand directly
            for i in 0..3 {
                for j in 0..3 {
                    let f = |pv: f64| {
                        let mut total = 0.0;
                        for ((r, c), &tv) in t.indexed_iter() {
                            let pval = if (r, c) == (i, j) { pv } else { p[[r, c]] };
                            if tv > 0.0 {
                                total += tv * (tv / (pval + 1e-8)).ln();
                            }
                        }
                        total
                    };
                    let fd = (f(p[[i, j]] + eps_fd) - f(p[[i, j]] - eps_fd)) / (2.0 * eps_fd);
                    let an = grad[[i, j]];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(((an - fd) / denom).abs() < 1e-4, "{an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn softmax_logit_grad_approaches_p_minus_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = random_distribution(4, 4, &mut rng);
        let t = random_distribution(4, 4, &mut rng);
        let g = kl_softmax_logit_grad(&p, &t, 1e-8);
        for ((gv, &pv), &tv) in g.iter().zip(p.iter()).zip(t.iter()) {
            assert!((gv - (pv - tv)).abs() < 1e-6, "{gv} vs {}", pv - tv);
        }
    }

    #[test]
    fn softmax_logit_grad_matches_finite_differences_through_softmax() {
        // full chain z → softmax → KL, checked against central differences
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let eps_fd = 1e-6;
        for _ in 0..20 {
            let z = Array2::from_shape_simple_fn((3, 3), || rng.gen_range(-2.0f64..2.0));
            let t = random_distribution(3, 3, &mut rng);
            let softmax = |z: &Array2<f64>| {
                let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut e = z.mapv(|v| (v - max).exp());
                let s: f64 = e.iter().sum();
                e.mapv_inplace(|v| v / s);
                e
            };
            let p = softmax(&z);
            let grad = kl_softmax_logit_grad(&p, &t, 1e-8);
            for i in 0..3 {
                for j in 0..3 {
                    let mut plus = z.clone();
                    plus[[i, j]] += eps_fd;
                    let mut minus = z.clone();
                    minus[[i, j]] -= eps_fd;
                    let lp = kl_divergence(&softmax(&plus), &t, 1e-8).unwrap();
                    let lm = kl_divergence(&softmax(&minus), &t, 1e-8).unwrap();
                    let fd = (lp - lm) / (2.0 * eps_fd);
                    let an = grad[[i, j]];
                    let denom = fd.abs().max(an.abs()).max(1e-6);
                    assert!(((an - fd) / denom).abs() < 1e-4, "{an} vs {fd}");
                }
            }
        }
    }

    #[test]
    fn batch_means_average_per_pair_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ps: Vec<Array2<f64>> = (0..3).map(|_| random_distribution(4, 4, &mut rng)).collect();
        let ts: Vec<Array2<f64>> = (0..3).map(|_| random_distribution(4, 4, &mut rng)).collect();
        let batch = kl_saliency_loss(&ps, &ts, 1e-8).unwrap();
        let manual: f64 = ps
            .iter()
            .zip(&ts)
            .map(|(p, t)| kl_divergence(p, t, 1e-8).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((batch - manual).abs() < 1e-12);
    }
}
