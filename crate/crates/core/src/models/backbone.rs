//! Densely connected feature backbone with three heads: a contrastive
//! embedding head, a 3-class classification head, and a truncated
//! feature-extraction tap used by the saliency network and fusion head.
//!
//! The standard configuration reproduces DenseNet-201 (growth 32, blocks
//! 6/12/48/32, stem 64) on single-channel input. The feature tap sits at
//! the end of the third transition: 896 channels at stride 32, so a
//! 640×512 image yields an 896×20×16 grid. A configuration flag moves the
//! tap to before that transition (1792 channels at stride 16) for the
//! alternative-truncation ablation.
//!
//! Training-mode forwards return cache structs holding exactly the batch
//! norm statistics needed for backward; convolution inputs are recomputed
//! from those caches instead of stored, which keeps the memory footprint
//! of a dense block proportional to one set of normalized activations per
//! layer.

use crate::nn::ops::{
    concat_channels, l2_normalize_rows, l2_normalize_rows_backward, relu_backward, relu_inplace,
};
use crate::nn::pool::{avg_pool_2x2, avg_pool_2x2_backward, MaxPoolCache};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnCache, Conv2d, GradStore, Linear,
    MaxPool2d, Params,
};
use crate::{Error, Result};
use ndarray::{s, Array2, Array4, ArrayView4, ArrayViewD, ArrayViewMutD};

/// Architecture hyperparameters. [`BackboneConfig::densenet201`] is the
/// full-scale network; [`BackboneConfig::desk`] is a narrow preset for
/// CPU-sized training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Channels added by each dense layer.
    pub growth: usize,
    /// Dense layers per block.
    pub blocks: [usize; 4],
    /// Stem convolution output channels.
    pub stem_channels: usize,
    /// Contrastive embedding width.
    pub embed_dim: usize,
    /// Tap features after the third transition (stride 32) when true, or
    /// after the third dense block (stride 16, twice the channels) when
    /// false. The full classification path is unaffected.
    pub include_transition3: bool,
}

impl BackboneConfig {
    pub fn densenet201() -> Self {
        Self {
            growth: 32,
            blocks: [6, 12, 48, 32],
            stem_channels: 64,
            embed_dim: 128,
            include_transition3: true,
        }
    }

    /// Narrow preset sized for single-core training.
    pub fn desk() -> Self {
        Self {
            growth: 8,
            blocks: [2, 2, 2, 2],
            stem_channels: 16,
            embed_dim: 16,
            include_transition3: true,
        }
    }

    /// Channels entering each of the four blocks, plus block outputs and
    /// transition outputs, computed from the growth schedule.
    fn flow(&self) -> ChannelFlow {
        let mut block_in = [0usize; 4];
        let mut block_out = [0usize; 4];
        let mut trans_out = [0usize; 3];
        let mut c = self.stem_channels;
        for i in 0..4 {
            block_in[i] = c;
            block_out[i] = c + self.blocks[i] * self.growth;
            c = block_out[i];
            if i < 3 {
                trans_out[i] = c / 2;
                c = trans_out[i];
            }
        }
        ChannelFlow { block_in, block_out, trans_out }
    }

    /// Width of the truncated feature tap.
    pub fn feature_channels(&self) -> usize {
        let flow = self.flow();
        if self.include_transition3 {
            flow.trans_out[2]
        } else {
            flow.block_out[2]
        }
    }

    /// Spatial downsampling factor of the truncated feature tap.
    pub fn feature_stride(&self) -> usize {
        if self.include_transition3 {
            32
        } else {
            16
        }
    }

    /// Channels entering the final classifier pooling.
    pub fn final_channels(&self) -> usize {
        self.flow().block_out[3]
    }

    fn validate(&self) -> Result<()> {
        if self.growth == 0 || self.stem_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every dense block needs at least one layer".into()));
        }
        let flow = self.flow();
        for (i, &out) in flow.block_out.iter().take(3).enumerate() {
            if out % 2 != 0 {
                return Err(Error::Config(format!(
                    "block {} output ({out} channels) is odd and cannot be halved by its transition",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

struct ChannelFlow {
    block_in: [usize; 4],
    block_out: [usize; 4],
    trans_out: [usize; 3],
}

/// One dense layer: BN → ReLU → 1×1 conv (to 4·growth) → BN → ReLU →
/// 3×3 conv (to growth). Pre-activation ordering.
#[derive(Debug, Clone)]
struct DenseLayer {
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
}

struct DenseLayerCache {
    bn1: BnCache,
    bn2: BnCache,
}

impl DenseLayer {
    fn new(prefix: &str, c_in: usize, growth: usize, rng: &mut impl rand::Rng) -> Self {
        let mid = 4 * growth;
        Self {
            bn1: BatchNorm2d::new(format!("{prefix}.bn1"), c_in),
            conv1: Conv2d::new(format!("{prefix}.conv1"), c_in, mid, 1, 1, 0, false, rng),
            bn2: BatchNorm2d::new(format!("{prefix}.bn2"), mid),
            conv2: Conv2d::new(format!("{prefix}.conv2"), mid, growth, 3, 1, 1, false, rng),
        }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let mut r1 = self.bn1.forward(x);
        relu_inplace(&mut r1);
        let z1 = self.conv1.forward(r1.view());
        let mut r2 = self.bn2.forward(z1.view());
        relu_inplace(&mut r2);
        self.conv2.forward(r2.view())
    }

    fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, DenseLayerCache) {
        let (mut r1, c1) = self.bn1.forward_train(x);
        relu_inplace(&mut r1);
        let z1 = self.conv1.forward(r1.view());
        let (mut r2, c2) = self.bn2.forward_train(z1.view());
        relu_inplace(&mut r2);
        let out = self.conv2.forward(r2.view());
        (out, DenseLayerCache { bn1: c1, bn2: c2 })
    }

    /// Gradient with respect to the layer's concatenated input.
    fn backward(
        &self,
        cache: &DenseLayerCache,
        d_out: &Array4<f32>,
        grads: &mut GradStore,
    ) -> Array4<f32> {
        let r2 = self.bn2.recompute_relu_output(&cache.bn2);
        let dr2 = self
            .conv2
            .backward(r2.view(), d_out, grads, true)
            .expect("dx requested");
        let dy2 = relu_backward(&r2, &dr2);
        let dz1 = self.bn2.backward(&cache.bn2, &dy2, grads);
        let r1 = self.bn1.recompute_relu_output(&cache.bn1);
        let dr1 = self
            .conv1
            .backward(r1.view(), &dz1, grads, true)
            .expect("dx requested");
        let dy1 = relu_backward(&r1, &dr1);
        self.bn1.backward(&cache.bn1, &dy1, grads)
    }
}

/// Dense block: each layer sees the concatenation of the block input and
/// every previous layer's output.
#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
    c_in: usize,
    growth: usize,
}

struct DenseBlockCache {
    layers: Vec<DenseLayerCache>,
}

impl DenseBlock {
    fn new(prefix: &str, c_in: usize, n_layers: usize, growth: usize, rng: &mut impl rand::Rng) -> Self {
        let layers = (0..n_layers)
            .map(|i| DenseLayer::new(&format!("{prefix}.layer{i}"), c_in + i * growth, growth, rng))
            .collect();
        Self { layers, c_in, growth }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let mut acc = x.to_owned();
        for layer in &self.layers {
            let new = layer.forward_eval(acc.view());
            acc = concat_channels(acc.view(), new.view());
        }
        acc
    }

    fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, DenseBlockCache) {
        let mut acc = x.to_owned();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (new, cache) = layer.forward_train(acc.view());
            caches.push(cache);
            acc = concat_channels(acc.view(), new.view());
        }
        (acc, DenseBlockCache { layers: caches })
    }

    /// Because each layer's input is a channel prefix of the block output,
    /// the backward pass runs on one accumulator over the full output
    /// width, adding each layer's input gradient into its prefix.
    fn backward(
        &self,
        cache: &DenseBlockCache,
        d_out: &Array4<f32>,
        grads: &mut GradStore,
    ) -> Array4<f32> {
        let mut d_acc = d_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let start = self.c_in + i * self.growth;
            let d_new = d_acc
                .slice(s![.., start..start + self.growth, .., ..])
                .to_owned();
            let dx = layer.backward(&cache.layers[i], &d_new, grads);
            let mut prefix = d_acc.slice_mut(s![.., ..start, .., ..]);
            prefix += &dx;
        }
        d_acc.slice(s![.., ..self.c_in, .., ..]).to_owned()
    }
}

/// Transition: BN → ReLU → 1×1 conv halving channels → 2×2 average pool.
#[derive(Debug, Clone)]
struct Transition {
    bn: BatchNorm2d,
    conv: Conv2d,
}

struct TransitionCache {
    bn: BnCache,
    pre_pool_hw: (usize, usize),
}

impl Transition {
    fn new(prefix: &str, c_in: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            bn: BatchNorm2d::new(format!("{prefix}.bn"), c_in),
            conv: Conv2d::new(format!("{prefix}.conv"), c_in, c_in / 2, 1, 1, 0, false, rng),
        }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let mut r = self.bn.forward(x);
        relu_inplace(&mut r);
        let z = self.conv.forward(r.view());
        avg_pool_2x2(z.view())
    }

    fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, TransitionCache) {
        let (mut r, bn) = self.bn.forward_train(x);
        relu_inplace(&mut r);
        let z = self.conv.forward(r.view());
        let pre_pool_hw = (z.dim().2, z.dim().3);
        (avg_pool_2x2(z.view()), TransitionCache { bn, pre_pool_hw })
    }

    fn backward(
        &self,
        cache: &TransitionCache,
        d_out: &Array4<f32>,
        grads: &mut GradStore,
    ) -> Array4<f32> {
        let dz = avg_pool_2x2_backward(d_out, cache.pre_pool_hw);
        let r = self.bn.recompute_relu_output(&cache.bn);
        let dr = self
            .conv
            .backward(r.view(), &dz, grads, true)
            .expect("dx requested");
        let dy = relu_backward(&r, &dr);
        self.bn.backward(&cache.bn, &dy, grads)
    }
}

/// Stem: 7×7/2 convolution, BN, ReLU, 3×3/2 max pool (overall stride 4).
#[derive(Debug, Clone)]
struct Stem {
    conv: Conv2d,
    bn: BatchNorm2d,
    pool: MaxPool2d,
}

struct StemCache {
    input: Array4<f32>,
    bn: BnCache,
    pool: MaxPoolCache,
}

impl Stem {
    fn new(channels: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            conv: Conv2d::new("backbone.stem.conv", 1, channels, 7, 2, 3, false, rng),
            bn: BatchNorm2d::new("backbone.stem.bn".into(), channels),
            pool: MaxPool2d { kernel: 3, stride: 2, pad: 1 },
        }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let z = self.conv.forward(x);
        let mut r = self.bn.forward(z.view());
        relu_inplace(&mut r);
        self.pool.forward(r.view()).0
    }

    fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, StemCache) {
        let z = self.conv.forward(x);
        let (mut r, bn) = self.bn.forward_train(z.view());
        relu_inplace(&mut r);
        let (out, pool) = self.pool.forward(r.view());
        (out, StemCache { input: x.to_owned(), bn, pool })
    }

    fn backward(&self, cache: &StemCache, d_out: &Array4<f32>, grads: &mut GradStore) {
        let dr = self.pool.backward(&cache.pool, d_out);
        let r = self.bn.recompute_relu_output(&cache.bn);
        let dy = relu_backward(&r, &dr);
        let dz = self.bn.backward(&cache.bn, &dy, grads);
        self.conv.backward(cache.input.view(), &dz, grads, false);
    }
}

/// Training caches for the shared trunk (stem through block 3).
pub struct TrunkCache {
    stem: StemCache,
    blocks: Vec<DenseBlockCache>,
    transitions: Vec<TransitionCache>,
}

/// Training caches for the embedding path.
pub struct EmbedCache {
    trunk: TrunkCache,
    trans3: Option<TransitionCache>,
    feat_hw: (usize, usize),
    gap: Array2<f32>,
    pre_norm: Array2<f32>,
    normed: Array2<f32>,
}

/// Training caches for the full classification path.
pub struct ClassCache {
    trunk: TrunkCache,
    trans3: TransitionCache,
    block4: DenseBlockCache,
    final_bn: BnCache,
    feat_hw: (usize, usize),
    gap: Array2<f32>,
}

/// The backbone network plus its two heads.
#[derive(Debug, Clone)]
pub struct DenseNetBackbone {
    cfg: BackboneConfig,
    stem: Stem,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    final_bn: BatchNorm2d,
    embed_head: Linear,
    cls_head: Linear,
}

impl DenseNetBackbone {
    pub fn new(cfg: BackboneConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let flow = cfg.flow();
        let stem = Stem::new(cfg.stem_channels, rng);
        let mut blocks = Vec::with_capacity(4);
        let mut transitions = Vec::with_capacity(3);
        for i in 0..4 {
            blocks.push(DenseBlock::new(
                &format!("backbone.block{}", i + 1),
                flow.block_in[i],
                cfg.blocks[i],
                cfg.growth,
                rng,
            ));
            if i < 3 {
                transitions.push(Transition::new(
                    &format!("backbone.trans{}", i + 1),
                    flow.block_out[i],
                    rng,
                ));
            }
        }
        let final_bn = BatchNorm2d::new("backbone.final_bn".into(), flow.block_out[3]);
        let embed_head = Linear::new("embed_head.linear", cfg.feature_channels(), cfg.embed_dim, rng);
        let cls_head = Linear::new("cls_head.linear", flow.block_out[3], crate::NUM_CLASSES, rng);
        Ok(Self { cfg, stem, blocks, transitions, final_bn, embed_head, cls_head })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    fn validate_input(&self, dim: (usize, usize, usize, usize)) -> Result<()> {
        let (n, c, h, w) = dim;
        if n == 0 || c != 1 {
            return Err(Error::Shape(format!(
                "backbone expects a nonempty single-channel batch, got {n}×{c}×{h}×{w}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h < 32 || w < 32 {
            return Err(Error::Shape(format!(
                "backbone input sides must be positive multiples of 32, got {h}×{w}"
            )));
        }
        Ok(())
    }

    fn trunk_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let mut h = self.stem.forward_eval(x);
        for i in 0..3 {
            h = self.blocks[i].forward_eval(h.view());
            if i < 2 {
                h = self.transitions[i].forward_eval(h.view());
            }
        }
        h
    }

    fn trunk_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, TrunkCache) {
        let (mut h, stem) = self.stem.forward_train(x);
        let mut blocks = Vec::with_capacity(3);
        let mut transitions = Vec::with_capacity(2);
        for i in 0..3 {
            let (out, cache) = self.blocks[i].forward_train(h.view());
            blocks.push(cache);
            h = out;
            if i < 2 {
                let (out, cache) = self.transitions[i].forward_train(h.view());
                transitions.push(cache);
                h = out;
            }
        }
        (h, TrunkCache { stem, blocks, transitions })
    }

    fn trunk_backward(&self, cache: &TrunkCache, d_block3: Array4<f32>, grads: &mut GradStore) {
        let mut d = d_block3;
        for i in (0..3).rev() {
            d = self.blocks[i].backward(&cache.blocks[i], &d, grads);
            if i > 0 {
                d = self.transitions[i - 1].backward(&cache.transitions[i - 1], &d, grads);
            }
        }
        self.stem.backward(&cache.stem, &d, grads);
    }

    /// Truncated feature tap, evaluation mode.
    pub fn forward_features(&self, x: ArrayView4<'_, f32>) -> Result<Array4<f32>> {
        self.validate_input(x.dim())?;
        let b3 = self.trunk_eval(x);
        Ok(if self.cfg.include_transition3 {
            self.transitions[2].forward_eval(b3.view())
        } else {
            b3
        })
    }

    /// Unit-norm contrastive embeddings, evaluation mode.
    pub fn forward_embedding(&self, x: ArrayView4<'_, f32>) -> Result<Array2<f32>> {
        let feats = self.forward_features(x)?;
        let gap = global_avg_pool(feats.view());
        Ok(l2_normalize_rows(&self.embed_head.forward(gap.view())))
    }

    /// Full-network class logits, evaluation mode.
    pub fn forward_class_logits(&self, x: ArrayView4<'_, f32>) -> Result<Array2<f32>> {
        self.validate_input(x.dim())?;
        let b3 = self.trunk_eval(x);
        let t3 = self.transitions[2].forward_eval(b3.view());
        let b4 = self.blocks[3].forward_eval(t3.view());
        let mut r = self.final_bn.forward(b4.view());
        relu_inplace(&mut r);
        let gap = global_avg_pool(r.view());
        Ok(self.cls_head.forward(gap.view()))
    }

    /// Rectified post-norm activations of the last dense block together
    /// with the class logits, evaluation mode. This is the feature map that
    /// class-activation mapping differentiates against.
    pub fn forward_final_activations(
        &self,
        x: ArrayView4<'_, f32>,
    ) -> Result<(Array4<f32>, Array2<f32>)> {
        self.validate_input(x.dim())?;
        let b3 = self.trunk_eval(x);
        let t3 = self.transitions[2].forward_eval(b3.view());
        let b4 = self.blocks[3].forward_eval(t3.view());
        let mut r = self.final_bn.forward(b4.view());
        relu_inplace(&mut r);
        let gap = global_avg_pool(r.view());
        let logits = self.cls_head.forward(gap.view());
        Ok((r, logits))
    }

    /// Weight matrix of the classification head, shape (3, final_channels).
    pub fn cls_weight(&self) -> &Array2<f32> {
        &self.cls_head.weight
    }

    /// Embedding forward in training mode (batch statistics, caches kept).
    pub fn forward_embedding_train(
        &mut self,
        x: ArrayView4<'_, f32>,
    ) -> Result<(Array2<f32>, EmbedCache)> {
        self.validate_input(x.dim())?;
        let (b3, trunk) = self.trunk_train(x);
        let (feats, trans3) = if self.cfg.include_transition3 {
            let (f, c) = self.transitions[2].forward_train(b3.view());
            (f, Some(c))
        } else {
            (b3, None)
        };
        let feat_hw = (feats.dim().2, feats.dim().3);
        let gap = global_avg_pool(feats.view());
        let pre_norm = self.embed_head.forward(gap.view());
        let normed = l2_normalize_rows(&pre_norm);
        Ok((
            normed.clone(),
            EmbedCache { trunk, trans3, feat_hw, gap, pre_norm, normed },
        ))
    }

    /// Backpropagate an embedding gradient into the trunk and embed head.
    pub fn backward_embedding(&self, cache: &EmbedCache, d_emb: &Array2<f32>, grads: &mut GradStore) {
        let d_pre = l2_normalize_rows_backward(&cache.pre_norm, &cache.normed, d_emb);
        let d_gap = self.embed_head.backward(cache.gap.view(), &d_pre, grads);
        let d_feat = global_avg_pool_backward(&d_gap, cache.feat_hw);
        let d_b3 = match &cache.trans3 {
            Some(c) => self.transitions[2].backward(c, &d_feat, grads),
            None => d_feat,
        };
        self.trunk_backward(&cache.trunk, d_b3, grads);
    }

    /// Classification forward in training mode.
    pub fn forward_class_logits_train(
        &mut self,
        x: ArrayView4<'_, f32>,
    ) -> Result<(Array2<f32>, ClassCache)> {
        self.validate_input(x.dim())?;
        let (b3, trunk) = self.trunk_train(x);
        let (t3_out, trans3) = self.transitions[2].forward_train(b3.view());
        let (b4_out, block4) = self.blocks[3].forward_train(t3_out.view());
        let (mut r, final_bn) = self.final_bn.forward_train(b4_out.view());
        relu_inplace(&mut r);
        let feat_hw = (r.dim().2, r.dim().3);
        let gap = global_avg_pool(r.view());
        let logits = self.cls_head.forward(gap.view());
        Ok((logits, ClassCache { trunk, trans3, block4, final_bn, feat_hw, gap }))
    }

    /// Backpropagate a logit gradient through the entire network.
    pub fn backward_class_logits(
        &self,
        cache: &ClassCache,
        d_logits: &Array2<f32>,
        grads: &mut GradStore,
    ) {
        let d_gap = self.cls_head.backward(cache.gap.view(), d_logits, grads);
        let d_r = global_avg_pool_backward(&d_gap, cache.feat_hw);
        let r = self.final_bn.recompute_relu_output(&cache.final_bn);
        let d_y = relu_backward(&r, &d_r);
        let d_b4 = self.final_bn.backward(&cache.final_bn, &d_y, grads);
        let d_t3 = self.blocks[3].backward(&cache.block4, &d_b4, grads);
        let d_b3 = self.transitions[2].backward(&cache.trans3, &d_t3, grads);
        self.trunk_backward(&cache.trunk, d_b3, grads);
    }
}

impl Params for DenseNetBackbone {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>)) {
        self.stem.conv.visit(f);
        self.stem.bn.visit(f);
        for i in 0..4 {
            for layer in &self.blocks[i].layers {
                layer.bn1.visit(f);
                layer.conv1.visit(f);
                layer.bn2.visit(f);
                layer.conv2.visit(f);
            }
            if i < 3 {
                self.transitions[i].bn.visit(f);
                self.transitions[i].conv.visit(f);
            }
        }
        self.final_bn.visit(f);
        self.embed_head.visit(f);
        self.cls_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>)) {
        self.stem.conv.visit_mut(f);
        self.stem.bn.visit_mut(f);
        for i in 0..4 {
            for layer in &mut self.blocks[i].layers {
                layer.bn1.visit_mut(f);
                layer.conv1.visit_mut(f);
                layer.bn2.visit_mut(f);
                layer.conv2.visit_mut(f);
            }
            if i < 3 {
                self.transitions[i].bn.visit_mut(f);
                self.transitions[i].conv.visit_mut(f);
            }
        }
        self.final_bn.visit_mut(f);
        self.embed_head.visit_mut(f);
        self.cls_head.visit_mut(f);
    }
}
