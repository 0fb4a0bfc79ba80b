//! Shared helpers for gradient checking the layer library.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1) — large enough that f32 central differences
/// are well conditioned.
pub fn rand_arr(shape: &[usize], rng: &mut impl Rng) -> ArrayD<f32> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0f32..1.0))
}

/// Central-difference gradient of a scalar f64 loss with respect to every
/// element of `x`, evaluated by re-running `f` with perturbed copies.
pub fn central_diff(x: &ArrayD<f32>, eps: f32, mut f: impl FnMut(&ArrayD<f32>) -> f64) -> ArrayD<f32> {
    let mut grad = ArrayD::<f32>::zeros(x.raw_dim());
    for idx in ndarray::indices(x.raw_dim()) {
        let mut plus = x.clone();
        plus[&idx] += eps;
        let mut minus = x.clone();
        minus[&idx] -= eps;
        grad[&idx] = ((f(&plus) - f(&minus)) / (2.0 * eps as f64)) as f32;
    }
    grad
}

/// Element-wise closeness with a relative tolerance and an absolute floor,
/// reporting the worst offender on failure.
pub fn assert_all_close(actual: &ArrayD<f32>, expected: &ArrayD<f32>, rtol: f32, atol: f32) {
    assert_eq!(actual.shape(), expected.shape());
    for (idx, (&a, &e)) in actual.iter().zip(expected.iter()).enumerate() {
        let tol = atol + rtol * e.abs().max(a.abs());
        assert!(
            (a - e).abs() <= tol,
            "element {idx}: analytic {a} vs finite-difference {e} (tol {tol})"
        );
    }
}

/// Deterministic projection weights so a tensor output can be reduced to a
/// scalar loss: `L = Σ wᵢ yᵢ` with fixed pseudo-random wᵢ.
pub fn projection(shape: &[usize], seed: u64) -> ArrayD<f32> {
    rand_arr(shape, &mut rng(seed))
}

pub fn project(y: &ArrayD<f32>, w: &ArrayD<f32>) -> f64 {
    y.iter()
        .zip(w.iter())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Compare an accumulated gradient tensor against a central difference
/// along the gradient's own direction.
///
/// Stepping along `g/‖g‖` makes the expected directional derivative `‖g‖`,
/// the largest value any unit direction can give, so the finite-difference
/// signal sits as far above the f32 forward-pass noise as possible; a
/// single-element or random-direction probe of the same tensor can sit
/// *below* that noise. Whole-tensor agreement still implies every entry
/// contributes with the right weight unless errors cancel exactly. `eps`
/// must stay small because the step crosses ReLU kinks whose error grows
/// linearly with it.
pub fn check_directional_grad<M: super::Params + Clone>(
    model: &M,
    grads: &super::GradStore,
    name: &str,
    loss: &dyn Fn(&M) -> f64,
    eps: f32,
    tol: f64,
) {
    let g = grads
        .get(name)
        .unwrap_or_else(|| panic!("no gradient accumulated for {name}"));
    let gnorm = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
    assert!(gnorm > 0.0, "{name}: gradient is identically zero");
    let dir = g.mapv(|v| (v as f64 / gnorm) as f32);
    let analytic = gnorm;

    let perturb = |scale: f32| -> f64 {
        let mut m = model.clone();
        m.visit_mut(&mut |n, mut v| {
            if n == name {
                v.zip_mut_with(&dir, |p, &d| *p += scale * d);
            }
        });
        loss(&m)
    };
    let fd = (perturb(eps) - perturb(-eps)) / (2.0 * eps as f64);
    let denom = fd.abs().max(analytic).max(1e-3);
    assert!(
        ((analytic - fd) / denom).abs() < tol,
        "{name}: analytic directional {analytic} vs finite difference {fd}"
    );
}
