//! Fully connected layer.

use super::GradStore;
use ndarray::{linalg::general_mat_mul, Array1, Array2, ArrayView2};

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    /// Weight matrix, shape `(out_features, in_features)`.
    pub weight: Array2<f32>,
    pub bias: Array1<f32>,
}

impl Linear {
    /// Uniform `±1/√fan_in` initialization for both weight and bias.
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            name: name.into(),
            weight: super::init::uniform_linear(out_features, in_features, rng),
            bias: super::init::uniform_bias(out_features, in_features, rng),
        }
    }

    /// Forward pass: `y = x · Wᵀ + b` for a batch `x` of shape `(n, in)`.
    pub fn forward(&self, x: ArrayView2<'_, f32>) -> Array2<f32> {
        let n = x.nrows();
        let out = self.weight.nrows();
        assert_eq!(
            x.ncols(),
            self.weight.ncols(),
            "{}: input feature mismatch",
            self.name
        );
        let mut y = Array2::<f32>::zeros((n, out));
        general_mat_mul(1.0, &x, &self.weight.t(), 0.0, &mut y);
        for mut row in y.rows_mut() {
            row += &self.bias;
        }
        y
    }

    /// Backward pass; accumulates `dW = dyᵀ·x` and `db = Σ dy`, returns `dx = dy·W`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, f32>,
        dy: &Array2<f32>,
        grads: &mut GradStore,
    ) -> Array2<f32> {
        let mut dw = Array2::<f32>::zeros(self.weight.dim());
        general_mat_mul(1.0, &dy.t(), &x, 0.0, &mut dw);
        let db = dy.sum_axis(ndarray::Axis(0));
        let mut dx = Array2::<f32>::zeros((x.nrows(), x.ncols()));
        general_mat_mul(1.0, dy, &self.weight, 0.0, &mut dx);
        grads.accumulate(&format!("{}.weight", self.name), dw.view().into_dyn());
        grads.accumulate(&format!("{}.bias", self.name), db.view().into_dyn());
        dx
    }
}

impl super::Params for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, f32>)) {
        f(&format!("{}.weight", self.name), self.weight.view().into_dyn());
        f(&format!("{}.bias", self.name), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, f32>)) {
        f(
            &format!("{}.weight", self.name),
            self.weight.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.name),
            self.bias.view_mut().into_dyn(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{assert_all_close, central_diff, project, projection, rand_arr, rng};
    use super::*;
    use crate::nn::GradStore;

    #[test]
    fn known_value_forward() {
        let lin = Linear {
            name: "fc".into(),
            weight: ndarray::array![[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]],
            bias: ndarray::array![0.1, 0.2, 0.3],
        };
        let x = ndarray::array![[2.0, -1.0]];
        let y = lin.forward(x.view());
        let expected = ndarray::array![[0.1, 2.2, -2.7]];
        assert_all_close(&y.into_dyn(), &expected.into_dyn(), 0.0, 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(21);
        let lin = Linear::new("fc", 5, 4, &mut r);
        let x = rand_arr(&[3, 5], &mut r);
        let pw = projection(&[3, 4], 17);

        let x2 = x.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let dy = pw.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut grads = GradStore::new();
        let dx = lin.backward(x2.view(), &dy, &mut grads);

        let fd_dx = central_diff(&x, 1e-2, |xv| {
            let xv2 = xv.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            project(&lin.forward(xv2.view()).into_dyn(), &pw)
        });
        assert_all_close(&dx.into_dyn(), &fd_dx, 1e-2, 1e-3);

        let w0 = lin.weight.clone().into_dyn();
        let fd_dw = central_diff(&w0, 1e-2, |wv| {
            let mut l2 = lin.clone();
            l2.weight = wv.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            let x2 = x.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            project(&l2.forward(x2.view()).into_dyn(), &pw)
        });
        assert_all_close(grads.get("fc.weight").unwrap(), &fd_dw, 1e-2, 1e-3);

        let b0 = lin.bias.clone().into_dyn();
        let fd_db = central_diff(&b0, 1e-2, |bv| {
            let mut l2 = lin.clone();
            l2.bias = bv.clone().into_dimensionality::<ndarray::Ix1>().unwrap();
            let x2 = x.clone().into_dimensionality::<ndarray::Ix2>().unwrap();
            project(&l2.forward(x2.view()).into_dyn(), &pw)
        });
        assert_all_close(grads.get("fc.bias").unwrap(), &fd_db, 1e-2, 1e-3);
    }
}
