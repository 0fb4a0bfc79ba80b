//! Adam optimizer with per-parameter first/second moment state.

use super::{GradStore, Params};
use ndarray::ArrayD;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Moments {
    m: ArrayD<f32>,
    v: ArrayD<f32>,
}

/// Optimizer state is keyed by parameter name; updates walk the model's
/// deterministic `visit_mut` order, never the map's iteration order.
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    /// Applies one update step to every parameter that has a recorded
    /// gradient. Parameters without gradients (frozen layers, batch-norm
    /// running statistics) are left untouched.
    pub fn step(&mut self, model: &mut impl Params, grads: &GradStore) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let b1 = self.cfg.beta1 as f64;
        let b2 = self.cfg.beta2 as f64;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let lr = self.cfg.lr as f64;
        let eps = self.cfg.eps as f64;

        let cfg = self.cfg;
        let state = &mut self.state;
        model.visit_mut(&mut |name, mut param| {
            let Some(grad) = grads.get(name) else {
                return;
            };
            assert_eq!(
                grad.shape(),
                param.shape(),
                "gradient/parameter shape mismatch for {name}"
            );
            let entry = state.entry(name.to_string()).or_insert_with(|| Moments {
                m: ArrayD::zeros(param.raw_dim()),
                v: ArrayD::zeros(param.raw_dim()),
            });
            let (b1f, b2f) = (cfg.beta1, cfg.beta2);
            entry
                .m
                .zip_mut_with(grad, |m, &g| *m = b1f * *m + (1.0 - b1f) * g);
            entry
                .v
                .zip_mut_with(grad, |v, &g| *v = b2f * *v + (1.0 - b2f) * g * g);
            ndarray::Zip::from(&mut param)
                .and(&entry.m)
                .and(&entry.v)
                .for_each(|p, &m, &v| {
                    let mhat = m as f64 / bc1;
                    let vhat = v as f64 / bc2;
                    *p -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
                });
        });
    }

    pub fn reset(&mut self) {
        self.step_count = 0;
        self.state.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayViewD, ArrayViewMutD};

    struct Scalar {
        value: ndarray::Array1<f32>,
    }

    impl Params for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>)) {
            f("p", self.value.view().into_dyn());
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>)) {
            f("p", self.value.view_mut().into_dyn());
        }
    }

    /// First step of Adam with constant gradient g: m̂ = g, v̂ = g², so the
    /// update is lr·g/(|g|+ε) ≈ lr·sign(g) regardless of magnitude.
    #[test]
    fn first_step_matches_closed_form() {
        for &g in &[0.001f32, 0.5, 40.0, -3.0] {
            let mut model = Scalar {
                value: ndarray::arr1(&[1.0]),
            };
            let mut opt = Adam::new(AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            });
            let mut grads = GradStore::new();
            grads.accumulate("p", ndarray::arr1(&[g]).view().into_dyn());
            opt.step(&mut model, &grads);
            let expected = 1.0 - 1e-2 * g / (g.abs() + 1e-8);
            assert!(
                (model.value[0] - expected).abs() < 1e-6,
                "g={g}: {} vs {expected}",
                model.value[0]
            );
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize (p-3)² by feeding the analytic gradient 2(p-3)
        let mut model = Scalar {
            value: ndarray::arr1(&[-2.0]),
        };
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let g = 2.0 * (model.value[0] - 3.0);
            let mut grads = GradStore::new();
            grads.accumulate("p", ndarray::arr1(&[g]).view().into_dyn());
            opt.step(&mut model, &grads);
        }
        assert!((model.value[0] - 3.0).abs() < 1e-2, "{}", model.value[0]);
    }

    #[test]
    fn parameters_without_gradients_stay_frozen() {
        struct Two {
            a: ndarray::Array1<f32>,
            b: ndarray::Array1<f32>,
        }
        impl Params for Two {
            fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>)) {
                f("a", self.a.view().into_dyn());
                f("b", self.b.view().into_dyn());
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>)) {
                f("a", self.a.view_mut().into_dyn());
                f("b", self.b.view_mut().into_dyn());
            }
        }
        let mut model = Two {
            a: ndarray::arr1(&[1.0]),
            b: ndarray::arr1(&[1.0]),
        };
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = GradStore::new();
        grads.accumulate("a", ndarray::arr1(&[1.0]).view().into_dyn());
        opt.step(&mut model, &grads);
        assert_ne!(model.a[0], 1.0);
        assert_eq!(model.b[0], 1.0);
    }
}
