//! Classification head that fuses pooled backbone features with pooled
//! decoder features from the saliency network.
//!
//! Both feature maps are global-average-pooled, concatenated, and passed
//! through a two-layer perceptron with dropout. During its training stage
//! the upstream networks are frozen, so the backward pass intentionally
//! stops at the concatenated feature vector.

use crate::nn::ops::{dropout_forward, relu2, relu2_backward};
use crate::nn::{global_avg_pool, GradStore, Linear, Params};
use crate::{Error, Result, NUM_CLASSES};
use ndarray::{s, Array2, ArrayView4, ArrayViewD, ArrayViewMutD};

/// Dimensions of the fusion classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// Channels of the backbone feature map (pooled to this many values).
    pub backbone_dim: usize,
    /// Channels of the final decoder level (pooled likewise).
    pub decoder_dim: usize,
    pub hidden_dim: usize,
    pub dropout: f32,
}

impl FusionConfig {
    /// Head matching the full-scale backbone (896 channels) and saliency
    /// decoder (32 channels).
    pub fn full() -> Self {
        Self { backbone_dim: 896, decoder_dim: 32, hidden_dim: 256, dropout: 0.3 }
    }

    /// Head for arbitrary upstream widths, keeping the standard hidden
    /// size and dropout.
    pub fn for_dims(backbone_dim: usize, decoder_dim: usize) -> Self {
        Self { backbone_dim, decoder_dim, ..Self::full() }
    }

    fn validate(&self) -> Result<()> {
        if self.backbone_dim == 0 || self.decoder_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("fusion head dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0,1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Dropout mask and layer inputs kept for the backward pass.
pub struct FusionCache {
    fused: Array2<f32>,
    hidden: Array2<f32>,
    dropped: Array2<f32>,
    mask: Array2<f32>,
}

/// Two-layer classification head over concatenated pooled features.
#[derive(Debug, Clone)]
pub struct FusionHead {
    cfg: FusionConfig,
    fc1: Linear,
    fc2: Linear,
}

impl FusionHead {
    /// The hidden bias starts at zero, so a freshly built head maps
    /// all-zero features to exactly the output-layer biases.
    pub fn new(cfg: FusionConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let fused = cfg.backbone_dim + cfg.decoder_dim;
        let mut fc1 = Linear::new("fusion_head.fc1", fused, cfg.hidden_dim, rng);
        fc1.bias.fill(0.0);
        let fc2 = Linear::new("fusion_head.fc2", cfg.hidden_dim, NUM_CLASSES, rng);
        Ok(Self { cfg, fc1, fc2 })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Pool and concatenate the two feature maps into one row per image.
    fn fuse(
        &self,
        backbone: ArrayView4<'_, f32>,
        decoder: ArrayView4<'_, f32>,
    ) -> Result<Array2<f32>> {
        let (nb, cb, _, _) = backbone.dim();
        let (nd, cd, _, _) = decoder.dim();
        if nb != nd {
            return Err(Error::Shape(format!(
                "feature batches disagree: backbone {nb} vs decoder {nd}"
            )));
        }
        if cb != self.cfg.backbone_dim || cd != self.cfg.decoder_dim {
            return Err(Error::Shape(format!(
                "feature channels {cb}+{cd} do not match the head ({}+{})",
                self.cfg.backbone_dim, self.cfg.decoder_dim
            )));
        }
        let pb = global_avg_pool(backbone);
        let pd = global_avg_pool(decoder);
        let mut fused = Array2::<f32>::zeros((nb, cb + cd));
        fused.slice_mut(s![.., ..cb]).assign(&pb);
        fused.slice_mut(s![.., cb..]).assign(&pd);
        Ok(fused)
    }

    /// Class logits in evaluation mode (dropout disabled).
    pub fn forward_eval(
        &self,
        backbone: ArrayView4<'_, f32>,
        decoder: ArrayView4<'_, f32>,
    ) -> Result<Array2<f32>> {
        let fused = self.fuse(backbone, decoder)?;
        let hidden = relu2(&self.fc1.forward(fused.view()));
        Ok(self.fc2.forward(hidden.view()))
    }

    /// Class logits in training mode, with the cache for [`FusionHead::backward`].
    pub fn forward_train(
        &self,
        backbone: ArrayView4<'_, f32>,
        decoder: ArrayView4<'_, f32>,
        rng: &mut impl rand::Rng,
    ) -> Result<(Array2<f32>, FusionCache)> {
        let fused = self.fuse(backbone, decoder)?;
        let hidden = relu2(&self.fc1.forward(fused.view()));
        let (dropped, mask) = dropout_forward(&hidden, self.cfg.dropout, rng);
        let logits = self.fc2.forward(dropped.view());
        Ok((logits, FusionCache { fused, hidden, dropped, mask }))
    }

    /// Accumulate head gradients from a logit gradient. Upstream feature
    /// gradients are not produced: the encoders are frozen in this stage.
    pub fn backward(&self, cache: &FusionCache, d_logits: &Array2<f32>, grads: &mut GradStore) {
        let d_dropped = self.fc2.backward(cache.dropped.view(), d_logits, grads);
        let d_hidden = &d_dropped * &cache.mask;
        let d_pre = relu2_backward(&cache.hidden, &d_hidden);
        let _ = self.fc1.backward(cache.fused.view(), &d_pre, grads);
    }
}

impl Params for FusionHead {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
