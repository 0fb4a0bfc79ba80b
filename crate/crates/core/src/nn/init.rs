//! Weight initialization helpers, all driven by a caller-supplied RNG so a
//! single seed reproduces every parameter in the network bit-for-bit.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// He-normal initialization for conv kernels using fan-out
/// (`cout * kh * kw`), matching common practice for ReLU networks.
pub fn kaiming_conv(cout: usize, cin: usize, kh: usize, kw: usize, rng: &mut impl Rng) -> Array4<f32> {
    let fan_out = (cout * kh * kw) as f64;
    let std = (2.0 / fan_out).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal parameters");
    Array4::from_shape_simple_fn((cout, cin, kh, kw), || dist.sample(rng) as f32)
}

/// Uniform `±1/√fan_in` initialization for fully connected weights.
pub fn uniform_linear(out_features: usize, in_features: usize, rng: &mut impl Rng) -> Array2<f32> {
    let bound = 1.0 / (in_features as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    Array2::from_shape_simple_fn((out_features, in_features), || dist.sample(rng) as f32)
}

/// Matching uniform bias initialization for a fully connected layer.
pub fn uniform_bias(out_features: usize, in_features: usize, rng: &mut impl Rng) -> Array1<f32> {
    let bound = 1.0 / (in_features as f64).sqrt();
    let dist = Uniform::new(-bound, bound);
    Array1::from_shape_simple_fn(out_features, || dist.sample(rng) as f32)
}
