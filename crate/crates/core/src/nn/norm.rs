//! Batch normalization over (N, H, W) per channel.

use super::GradStore;
use ndarray::{s, Array1, Array4, ArrayView4};

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
}

/// Saved normalized activations and per-channel scale for backward.
pub struct BnCache {
    pub xhat: Array4<f32>,
    pub inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(name: String, channels: usize) -> Self {
        Self {
            name,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    /// Training-mode forward: normalizes with batch statistics (accumulated
    /// in f64 for determinism) and updates the running estimates.
    pub fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, BnCache) {
        let x_std = x.as_standard_layout();
        let x = x_std.view();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "{}: channel mismatch", self.name);
        let cnt = (n * h * w) as f64;

        let mut mean = Array1::<f32>::zeros(c);
        let mut inv_std = Array1::<f32>::zeros(c);
        let mut xhat = Array4::<f32>::zeros((n, c, h, w));
        for ch in 0..c {
            let mut sum = 0.0f64;
            for i in 0..n {
                let plane = x.slice(s![i, ch, .., ..]);
                let ps = plane.to_slice().expect("bn input plane contiguous");
                sum += ps.iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = sum / cnt;
            let mut varsum = 0.0f64;
            for i in 0..n {
                let plane = x.slice(s![i, ch, .., ..]);
                let ps = plane.to_slice().unwrap();
                varsum += ps
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            let var = varsum / cnt;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            mean[ch] = m as f32;
            inv_std[ch] = istd as f32;

            let mom = self.momentum;
            self.running_mean[ch] = (1.0 - mom) * self.running_mean[ch] + mom * m as f32;
            // unbiased variance for the running estimate
            let unbiased = if cnt > 1.0 { var * cnt / (cnt - 1.0) } else { var };
            self.running_var[ch] = (1.0 - mom) * self.running_var[ch] + mom * unbiased as f32;

            for i in 0..n {
                let src = x.slice(s![i, ch, .., ..]);
                let ss = src.to_slice().unwrap();
                let mut dst = xhat.slice_mut(s![i, ch, .., ..]);
                let ds = dst.as_slice_mut().unwrap();
                let (mf, sf) = (mean[ch], inv_std[ch]);
                for (d, &v) in ds.iter_mut().zip(ss) {
                    *d = (v - mf) * sf;
                }
            }
        }

        let mut y = xhat.clone();
        self.scale_shift(&mut y);
        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics.
    pub fn forward(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let (n, c, _, _) = x.dim();
        let mut y = x.as_standard_layout().into_owned();
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            let m = self.running_mean[ch];
            let istd = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            for i in 0..n {
                y.slice_mut(s![i, ch, .., ..])
                    .mapv_inplace(|v| (v - m) * istd * g + b);
            }
        }
        y
    }

    fn scale_shift(&self, y: &mut Array4<f32>) {
        let (n, c, _, _) = y.dim();
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            for i in 0..n {
                y.slice_mut(s![i, ch, .., ..]).mapv_inplace(|v| v * g + b);
            }
        }
    }

    /// Recompute the post-ReLU activation `max(γ·x̂ + β, 0)` from the cache.
    /// Dense blocks use this to avoid storing conv inputs.
    pub fn recompute_relu_output(&self, cache: &BnCache) -> Array4<f32> {
        let (n, c, h, w) = cache.xhat.dim();
        let mut y = Array4::<f32>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = self.gamma[ch];
            let b = self.beta[ch];
            for i in 0..n {
                let src = cache.xhat.slice(s![i, ch, .., ..]);
                let ss = src.to_slice().unwrap();
                let mut dst = y.slice_mut(s![i, ch, .., ..]);
                let ds = dst.as_slice_mut().unwrap();
                for (d, &v) in ds.iter_mut().zip(ss) {
                    *d = (v * g + b).max(0.0);
                }
            }
        }
        y
    }

    /// Backward through training-mode normalization.
    pub fn backward(&self, cache: &BnCache, dy: &Array4<f32>, grads: &mut GradStore) -> Array4<f32> {
        let (n, c, h, w) = dy.dim();
        let cnt = (n * h * w) as f64;
        let mut dgamma = Array1::<f32>::zeros(c);
        let mut dbeta = Array1::<f32>::zeros(c);
        let mut dx = Array4::<f32>::zeros((n, c, h, w));

        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let dyp = dy.slice(s![i, ch, .., ..]);
                let xp = cache.xhat.slice(s![i, ch, .., ..]);
                let dys = dyp.to_slice().unwrap();
                let xs = xp.to_slice().unwrap();
                for (&d, &xh) in dys.iter().zip(xs) {
                    sum_dy += d as f64;
                    sum_dy_xhat += d as f64 * xh as f64;
                }
            }
            dbeta[ch] = sum_dy as f32;
            dgamma[ch] = sum_dy_xhat as f32;
            let mean_dy = (sum_dy / cnt) as f32;
            let mean_dy_xhat = (sum_dy_xhat / cnt) as f32;
            let k = self.gamma[ch] * cache.inv_std[ch];
            for i in 0..n {
                let dyp = dy.slice(s![i, ch, .., ..]);
                let xp = cache.xhat.slice(s![i, ch, .., ..]);
                let dys = dyp.to_slice().unwrap();
                let xs = xp.to_slice().unwrap();
                let mut dst = dx.slice_mut(s![i, ch, .., ..]);
                let ds = dst.as_slice_mut().unwrap();
                for ((d, &g), &xh) in ds.iter_mut().zip(dys).zip(xs) {
                    *d = k * (g - mean_dy - xh * mean_dy_xhat);
                }
            }
        }
        grads.accumulate(&format!("{}.weight", self.name), dgamma.view().into_dyn());
        grads.accumulate(&format!("{}.bias", self.name), dbeta.view().into_dyn());
        dx
    }
}

impl super::Params for BatchNorm2d {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f32>)) {
        f(&format!("{}.weight", self.name), self.gamma.view().into_dyn());
        f(&format!("{}.bias", self.name), self.beta.view().into_dyn());
        f(
            &format!("{}.running_mean", self.name),
            self.running_mean.view().into_dyn(),
        );
        f(
            &format!("{}.running_var", self.name),
            self.running_var.view().into_dyn(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f32>)) {
        f(
            &format!("{}.weight", self.name),
            self.gamma.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.name),
            self.beta.view_mut().into_dyn(),
        );
        f(
            &format!("{}.running_mean", self.name),
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            &format!("{}.running_var", self.name),
            self.running_var.view_mut().into_dyn(),
        );
    }
}
