//! Model components: the dense feature backbone, the residual
//! squeeze-and-excitation UNet for saliency, and the fusion classifier
//! head that joins them.

pub mod backbone;
pub mod fusion;
pub mod salnet;

pub use backbone::{BackboneConfig, DenseNetBackbone};
pub use fusion::{FusionConfig, FusionHead};
pub use salnet::{BlockStyle, SalNetConfig, SaliencyNet};
