//! Elementwise activations and small tensor utilities.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;

pub fn relu(x: &Array4<f32>) -> Array4<f32> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_inplace(x: &mut Array4<f32>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Backward through ReLU given the *output* of the forward pass: gradient
/// flows wherever the output is strictly positive.
pub fn relu_backward(y: &Array4<f32>, dy: &Array4<f32>) -> Array4<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn relu_backward_inplace(y: &Array4<f32>, dy: &mut Array4<f32>) {
    dy.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Rectifier for 2-D activations (vector heads).
pub fn relu2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through [`relu2`]: `y` is the forward output.
pub fn relu2_backward(y: &Array2<f32>, dy: &Array2<f32>) -> Array2<f32> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

/// Channel concatenation `[a | b]` along axis 1.
pub fn concat_channels(a: ArrayView4<'_, f32>, b: ArrayView4<'_, f32>) -> Array4<f32> {
    let (n, ca, h, w) = a.dim();
    let (nb, cb, hb, wb) = b.dim();
    assert_eq!((n, h, w), (nb, hb, wb), "concat shapes compatible");
    // built by assignment rather than `ndarray::concatenate`, which would
    // put the channel axis at the largest stride and break the kernels'
    // standard-layout fast paths
    let mut y = Array4::<f32>::zeros((n, ca + cb, h, w));
    y.slice_mut(s![.., ..ca, .., ..]).assign(&a);
    y.slice_mut(s![.., ca.., .., ..]).assign(&b);
    y
}

/// Splits a gradient w.r.t. a channel concatenation back into the two parts.
pub fn split_channels(dy: &Array4<f32>, c_a: usize) -> (Array4<f32>, Array4<f32>) {
    let da = dy.slice(s![.., ..c_a, .., ..]).to_owned();
    let db = dy.slice(s![.., c_a.., .., ..]).to_owned();
    (da, db)
}

/// Softmax over all pixels of a logit plane, computed in f64 with a max
/// shift. The result sums to 1 up to f64 roundoff.
pub fn spatial_softmax(logits: ArrayView2<'_, f32>) -> Array2<f64> {
    let (h, w) = logits.dim();
    let ls_std = logits.as_standard_layout();
    let ls = ls_std.as_slice().expect("standard layout is sliceable");
    let max = ls.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut out = Array2::<f64>::zeros((h, w));
    {
        let os = out.as_slice_mut().unwrap();
        let mut sum = 0.0f64;
        for (o, &v) in os.iter_mut().zip(ls) {
            let e = (v as f64 - max).exp();
            *o = e;
            sum += e;
        }
        for o in os.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Inverted dropout: units are zeroed with probability `p` and survivors are
/// scaled by `1/(1-p)`. Returns the applied multiplier mask for backward.
pub fn dropout_forward(
    x: &Array2<f32>,
    p: f32,
    rng: &mut impl Rng,
) -> (Array2<f32>, Array2<f32>) {
    assert!((0.0..1.0).contains(&p), "dropout rate must be in [0,1)");
    if p == 0.0 {
        return (x.clone(), Array2::ones(x.dim()));
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let mask = Array2::from_shape_simple_fn(x.dim(), || {
        if rng.gen::<f32>() < keep {
            scale
        } else {
            0.0
        }
    });
    (x * &mask, mask)
}

pub fn dropout_backward(dy: &Array2<f32>, mask: &Array2<f32>) -> Array2<f32> {
    dy * mask
}

/// Row-wise L2 normalization onto the unit sphere; rows with tiny norm are
/// left untouched to avoid dividing by ~0.
pub fn l2_normalize_rows(x: &Array2<f32>) -> Array2<f32> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let inv = (1.0 / norm) as f32;
            row.mapv_inplace(|v| v * inv);
        }
    }
    y
}

/// Backward through row-wise L2 normalization: with `y = x/‖x‖`,
/// `dx = (dy − y·(y⊤dy)) / ‖x‖`.
pub fn l2_normalize_rows_backward(
    x: &Array2<f32>,
    y: &Array2<f32>,
    dy: &Array2<f32>,
) -> Array2<f32> {
    let mut dx = Array2::<f32>::zeros(x.dim());
    for i in 0..x.nrows() {
        let norm = x
            .row(i)
            .iter()
            .map(|&v| (v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm <= 1e-12 {
            dx.row_mut(i).assign(&dy.row(i));
            continue;
        }
        let dot: f64 = y
            .row(i)
            .iter()
            .zip(dy.row(i).iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let inv = 1.0 / norm;
        for j in 0..x.ncols() {
            dx[[i, j]] = ((dy[[i, j]] as f64 - y[[i, j]] as f64 * dot) * inv) as f32;
        }
    }
    dx
}
