//! Saliency prediction UNet with residual squeeze-and-excitation encoder
//! blocks and frozen backbone features fused at the bottleneck.
//!
//! The encoder keeps five skip resolutions (/1 … /16) and a /32
//! bottleneck; backbone features (same /32 grid) are concatenated there
//! and projected by a 1×1 convolution before decoding. Passing `None` for
//! the backbone features substitutes zeros, which is the single-encoder
//! ablation path. A plain double-convolution block style (no residual, no
//! SE) gives the standard-UNet ablation on the same skeleton, so the two
//! differ only in block wiring.
//!
//! The output head is a 1×1 convolution to one logit per pixel followed by
//! a spatial softmax, so every predicted map is a probability distribution
//! by construction, whatever the parameter values.

use crate::data::SaliencyMap;
use crate::nn::ops::{
    concat_channels, relu2, relu2_backward, relu_backward, relu_inplace, sigmoid, spatial_softmax,
    split_channels,
};
use crate::nn::pool::{upsample_nearest_2x, upsample_nearest_2x_backward};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, BatchNorm2d, BnCache, Conv2d, GradStore, Linear,
    Params,
};
use crate::{Error, Result};
use ndarray::{s, Array2, Array4, ArrayView4, ArrayViewD, ArrayViewMutD};

/// Encoder block wiring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockStyle {
    /// Pre-activation residual block with an SE gate on the residual branch.
    ResSe,
    /// Plain post-activation double convolution (standard-UNet ablation).
    Plain,
}

/// Architecture hyperparameters for [`SaliencyNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SalNetConfig {
    /// Encoder channels at resolutions /1, /2, /4, /8, /16. The bottleneck
    /// at /32 keeps the last width.
    pub channels: [usize; 5],
    /// SE bottleneck reduction ratio.
    pub se_ratio: usize,
    /// Channel count of the backbone features joined at the bottleneck.
    pub backbone_channels: usize,
    /// Width after the 1×1 fusion projection.
    pub fusion_channels: usize,
    pub block_style: BlockStyle,
}

impl SalNetConfig {
    /// Full-scale dual-encoder configuration.
    pub fn res_se_unet(backbone_channels: usize) -> Self {
        Self {
            channels: [32, 64, 128, 256, 512],
            se_ratio: 16,
            backbone_channels,
            fusion_channels: 1024,
            block_style: BlockStyle::ResSe,
        }
    }

    /// Standard-UNet ablation: plain blocks on the same skeleton.
    pub fn unet_s(backbone_channels: usize) -> Self {
        Self {
            block_style: BlockStyle::Plain,
            ..Self::res_se_unet(backbone_channels)
        }
    }

    /// Narrow preset sized for single-core training.
    pub fn desk(backbone_channels: usize) -> Self {
        Self {
            channels: [4, 8, 16, 32, 64],
            se_ratio: 4,
            backbone_channels,
            fusion_channels: 32,
            block_style: BlockStyle::ResSe,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0)
            || self.fusion_channels == 0
            || self.backbone_channels == 0
        {
            return Err(Error::Config("saliency net widths must be positive".into()));
        }
        if self.block_style == BlockStyle::ResSe {
            if self.se_ratio == 0 {
                return Err(Error::Config("SE reduction ratio must be positive".into()));
            }
            for &c in &self.channels {
                if c % self.se_ratio != 0 {
                    return Err(Error::Config(format!(
                        "channel width {c} is not divisible by the SE ratio {}",
                        self.se_ratio
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Squeeze-and-excitation gate: GAP → C/r bottleneck → sigmoid per-channel
/// scales in (0,1).
#[derive(Debug, Clone)]
struct SeGate {
    fc1: Linear,
    fc2: Linear,
}

struct SeCache {
    x: Array4<f32>,
    gap: Array2<f32>,
    r1: Array2<f32>,
    gate: Array2<f32>,
}

impl SeGate {
    fn new(prefix: &str, channels: usize, ratio: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            fc1: Linear::new(format!("{prefix}.se.fc1"), channels, channels / ratio, rng),
            fc2: Linear::new(format!("{prefix}.se.fc2"), channels / ratio, channels, rng),
        }
    }

    fn gates(&self, x: ArrayView4<'_, f32>) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let gap = global_avg_pool(x);
        let r1 = relu2(&self.fc1.forward(gap.view()));
        let gate = self.fc2.forward(r1.view()).mapv(sigmoid);
        (gap, r1, gate)
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        let (_, _, gate) = self.gates(x);
        scale_channels(x, &gate)
    }

    fn forward_train(&self, x: ArrayView4<'_, f32>) -> (Array4<f32>, SeCache) {
        let (gap, r1, gate) = self.gates(x);
        let y = scale_channels(x, &gate);
        (y, SeCache { x: x.to_owned(), gap, r1, gate })
    }

    fn backward(&self, cache: &SeCache, dy: &Array4<f32>, grads: &mut GradStore) -> Array4<f32> {
        let (n, c, h, w) = cache.x.dim();
        // direct path: y = x · g
        let mut dx = scale_channels(dy.view(), &cache.gate);
        // gate path: dg[n,c] = Σ_hw dy·x, through sigmoid and the bottleneck
        let mut dgate = Array2::<f32>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0f64;
                for r in 0..h {
                    for cc in 0..w {
                        acc += dy[[i, ch, r, cc]] as f64 * cache.x[[i, ch, r, cc]] as f64;
                    }
                }
                dgate[[i, ch]] = acc as f32;
            }
        }
        let dz2 = &dgate * &cache.gate.mapv(|g| g * (1.0 - g));
        let dr1 = self.fc2.backward(cache.r1.view(), &dz2, grads);
        let dz1 = relu2_backward(&cache.r1, &dr1);
        let dgap = self.fc1.backward(cache.gap.view(), &dz1, grads);
        dx += &global_avg_pool_backward(&dgap, (h, w));
        dx
    }
}

/// Multiply each channel plane by its per-image gate.
fn scale_channels(x: ArrayView4<'_, f32>, gate: &Array2<f32>) -> Array4<f32> {
    let mut y = x.to_owned();
    for (i, mut img) in y.outer_iter_mut().enumerate() {
        for (c, mut plane) in img.outer_iter_mut().enumerate() {
            let g = gate[[i, c]];
            plane.mapv_inplace(|v| v * g);
        }
    }
    y
}

/// Channel-preserving encoder block in one of the two wirings.
#[derive(Debug, Clone)]
struct EncBlock {
    style: BlockStyle,
    bn1: BatchNorm2d,
    conv1: Conv2d,
    bn2: BatchNorm2d,
    conv2: Conv2d,
    se: Option<SeGate>,
}

struct EncBlockCache {
    /// Plain style stores the block input (first convolution's input);
    /// the residual style reconstructs everything from the BN caches.
    input: Option<Array4<f32>>,
    bn1: BnCache,
    bn2: BnCache,
    se: Option<SeCache>,
}

impl EncBlock {
    fn new(prefix: &str, channels: usize, style: BlockStyle, se_ratio: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            style,
            bn1: BatchNorm2d::new(format!("{prefix}.bn1"), channels),
            conv1: Conv2d::new(format!("{prefix}.conv1"), channels, channels, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(format!("{prefix}.bn2"), channels),
            conv2: Conv2d::new(format!("{prefix}.conv2"), channels, channels, 3, 1, 1, false, rng),
            se: (style == BlockStyle::ResSe)
                .then(|| SeGate::new(prefix, channels, se_ratio, rng)),
        }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>) -> Array4<f32> {
        match self.style {
            BlockStyle::ResSe => {
                let mut r1 = self.bn1.forward(x);
                relu_inplace(&mut r1);
                let z1 = self.conv1.forward(r1.view());
                let mut r2 = self.bn2.forward(z1.view());
                relu_inplace(&mut r2);
                let z2 = self.conv2.forward(r2.view());
                let gated = self.se.as_ref().expect("residual style").forward_eval(z2.view());
                gated + &x
            }
            BlockStyle::Plain => {
                let z1 = self.conv1.forward(x);
                let mut r1 = self.bn1.forward(z1.view());
                relu_inplace(&mut r1);
                let z2 = self.conv2.forward(r1.view());
                let mut r2 = self.bn2.forward(z2.view());
                relu_inplace(&mut r2);
                r2
            }
        }
    }

    fn forward_train(&mut self, x: ArrayView4<'_, f32>) -> (Array4<f32>, EncBlockCache) {
        match self.style {
            BlockStyle::ResSe => {
                let (mut r1, c1) = self.bn1.forward_train(x);
                relu_inplace(&mut r1);
                let z1 = self.conv1.forward(r1.view());
                let (mut r2, c2) = self.bn2.forward_train(z1.view());
                relu_inplace(&mut r2);
                let z2 = self.conv2.forward(r2.view());
                let (gated, se_cache) =
                    self.se.as_ref().expect("residual style").forward_train(z2.view());
                let out = gated + &x;
                (out, EncBlockCache { input: None, bn1: c1, bn2: c2, se: Some(se_cache) })
            }
            BlockStyle::Plain => {
                let z1 = self.conv1.forward(x);
                let (mut r1, c1) = self.bn1.forward_train(z1.view());
                relu_inplace(&mut r1);
                let z2 = self.conv2.forward(r1.view());
                let (mut r2, c2) = self.bn2.forward_train(z2.view());
                relu_inplace(&mut r2);
                (r2, EncBlockCache { input: Some(x.to_owned()), bn1: c1, bn2: c2, se: None })
            }
        }
    }

    fn backward(&self, cache: &EncBlockCache, d_out: &Array4<f32>, grads: &mut GradStore) -> Array4<f32> {
        match self.style {
            BlockStyle::ResSe => {
                let dz2 = self.se.as_ref().expect("residual style").backward(
                    cache.se.as_ref().expect("residual cache"),
                    d_out,
                    grads,
                );
                let r2 = self.bn2.recompute_relu_output(&cache.bn2);
                let dr2 = self.conv2.backward(r2.view(), &dz2, grads, true).expect("dx");
                let dy2 = relu_backward(&r2, &dr2);
                let dz1 = self.bn2.backward(&cache.bn2, &dy2, grads);
                let r1 = self.bn1.recompute_relu_output(&cache.bn1);
                let dr1 = self.conv1.backward(r1.view(), &dz1, grads, true).expect("dx");
                let dy1 = relu_backward(&r1, &dr1);
                let dx_main = self.bn1.backward(&cache.bn1, &dy1, grads);
                dx_main + d_out
            }
            BlockStyle::Plain => {
                let r2 = self.bn2.recompute_relu_output(&cache.bn2);
                let dy2 = relu_backward(&r2, d_out);
                let dz2 = self.bn2.backward(&cache.bn2, &dy2, grads);
                let r1 = self.bn1.recompute_relu_output(&cache.bn1);
                let dr1 = self.conv2.backward(r1.view(), &dz2, grads, true).expect("dx");
                let dy1 = relu_backward(&r1, &dr1);
                let dz1 = self.bn1.backward(&cache.bn1, &dy1, grads);
                self.conv1
                    .backward(cache.input.as_ref().expect("plain cache").view(), &dz1, grads, true)
                    .expect("dx")
            }
        }
    }
}

/// Decoder level: nearest ×2 upsample → 3×3 conv → BN → ReLU → skip
/// concatenation → 3×3 conv → BN → ReLU.
#[derive(Debug, Clone)]
struct DecLevel {
    conv_a: Conv2d,
    bn_a: BatchNorm2d,
    conv_b: Conv2d,
    bn_b: BatchNorm2d,
    c_out: usize,
}

struct DecCache {
    upsampled: Array4<f32>,
    bn_a: BnCache,
    concat: Array4<f32>,
    bn_b: BnCache,
}

impl DecLevel {
    fn new(prefix: &str, c_in: usize, c_out: usize, skip_c: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            conv_a: Conv2d::new(format!("{prefix}.conv_a"), c_in, c_out, 3, 1, 1, false, rng),
            bn_a: BatchNorm2d::new(format!("{prefix}.bn_a"), c_out),
            conv_b: Conv2d::new(format!("{prefix}.conv_b"), c_out + skip_c, c_out, 3, 1, 1, false, rng),
            bn_b: BatchNorm2d::new(format!("{prefix}.bn_b"), c_out),
            c_out,
        }
    }

    fn forward_eval(&self, x: ArrayView4<'_, f32>, skip: ArrayView4<'_, f32>) -> Array4<f32> {
        let up = upsample_nearest_2x(x);
        let mut ra = self.bn_a.forward(self.conv_a.forward(up.view()).view());
        relu_inplace(&mut ra);
        let cat = concat_channels(ra.view(), skip);
        let mut rb = self.bn_b.forward(self.conv_b.forward(cat.view()).view());
        relu_inplace(&mut rb);
        rb
    }

    fn forward_train(
        &mut self,
        x: ArrayView4<'_, f32>,
        skip: ArrayView4<'_, f32>,
    ) -> (Array4<f32>, DecCache) {
        let up = upsample_nearest_2x(x);
        let za = self.conv_a.forward(up.view());
        let (mut ra, ca) = self.bn_a.forward_train(za.view());
        relu_inplace(&mut ra);
        let cat = concat_channels(ra.view(), skip);
        let zb = self.conv_b.forward(cat.view());
        let (mut rb, cb) = self.bn_b.forward_train(zb.view());
        relu_inplace(&mut rb);
        (rb, DecCache { upsampled: up, bn_a: ca, concat: cat, bn_b: cb })
    }

    /// Returns the gradients for the level input and the skip connection.
    fn backward(
        &self,
        cache: &DecCache,
        d_out: &Array4<f32>,
        grads: &mut GradStore,
    ) -> (Array4<f32>, Array4<f32>) {
        let rb = self.bn_b.recompute_relu_output(&cache.bn_b);
        let dyb = relu_backward(&rb, d_out);
        let dzb = self.bn_b.backward(&cache.bn_b, &dyb, grads);
        let dcat = self.conv_b.backward(cache.concat.view(), &dzb, grads, true).expect("dx");
        let (dra, dskip) = split_channels(&dcat, self.c_out);
        let ra = self.bn_a.recompute_relu_output(&cache.bn_a);
        let dya = relu_backward(&ra, &dra);
        let dza = self.bn_a.backward(&cache.bn_a, &dya, grads);
        let dup = self.conv_a.backward(cache.upsampled.view(), &dza, grads, true).expect("dx");
        (upsample_nearest_2x_backward(&dup), dskip)
    }
}

/// Training caches for one saliency forward pass.
pub struct SalCache {
    images: Array4<f32>,
    enc: Vec<EncBlockCache>,
    skips: Vec<Array4<f32>>,
    concat: Array4<f32>,
    fusion_bn: BnCache,
    dec: Vec<DecCache>,
}

/// The saliency UNet.
#[derive(Debug, Clone)]
pub struct SaliencyNet {
    cfg: SalNetConfig,
    stem: Conv2d,
    enc: Vec<EncBlock>,
    down: Vec<Conv2d>,
    fusion_conv: Conv2d,
    fusion_bn: BatchNorm2d,
    dec: Vec<DecLevel>,
    final_conv: Conv2d,
}

impl SaliencyNet {
    pub fn new(cfg: SalNetConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.channels;
        let stem = Conv2d::new("salnet.stem", 1, ch[0], 3, 1, 1, false, rng);
        let mut enc = Vec::with_capacity(5);
        let mut down = Vec::with_capacity(5);
        for i in 0..5 {
            enc.push(EncBlock::new(
                &format!("salnet.enc{i}"),
                ch[i],
                cfg.block_style,
                cfg.se_ratio,
                rng,
            ));
            let c_next = if i < 4 { ch[i + 1] } else { ch[4] };
            down.push(Conv2d::new(format!("salnet.down{i}"), ch[i], c_next, 3, 2, 1, false, rng));
        }
        let fusion_conv = Conv2d::new(
            "salnet.fusion.conv",
            ch[4] + cfg.backbone_channels,
            cfg.fusion_channels,
            1,
            1,
            0,
            false,
            rng,
        );
        let fusion_bn = BatchNorm2d::new("salnet.fusion.bn".into(), cfg.fusion_channels);
        let mut dec = Vec::with_capacity(5);
        let mut c_in = cfg.fusion_channels;
        for i in 0..5 {
            let c_out = ch[4 - i];
            dec.push(DecLevel::new(&format!("salnet.dec{i}"), c_in, c_out, c_out, rng));
            c_in = c_out;
        }
        let final_conv = Conv2d::new("salnet.final", ch[0], 1, 1, 1, 0, true, rng);
        Ok(Self { cfg, stem, enc, down, fusion_conv, fusion_bn, dec, final_conv })
    }

    pub fn config(&self) -> &SalNetConfig {
        &self.cfg
    }

    fn validate_inputs(
        &self,
        images: ArrayView4<'_, f32>,
        backbone: Option<&ArrayView4<'_, f32>>,
    ) -> Result<()> {
        let (n, c, h, w) = images.dim();
        if n == 0 || c != 1 {
            return Err(Error::Shape(format!(
                "saliency net expects a nonempty single-channel batch, got {n}×{c}×{h}×{w}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h < 32 || w < 32 {
            return Err(Error::Shape(format!(
                "saliency net input sides must be positive multiples of 32, got {h}×{w}"
            )));
        }
        if let Some(bb) = backbone {
            let want = (n, self.cfg.backbone_channels, h / 32, w / 32);
            if bb.dim() != want {
                return Err(Error::Shape(format!(
                    "backbone features {:?} do not match the bottleneck grid {want:?}",
                    bb.dim()
                )));
            }
        }
        Ok(())
    }

    fn backbone_or_zeros(
        &self,
        backbone: Option<ArrayView4<'_, f32>>,
        n: usize,
        h32: usize,
        w32: usize,
    ) -> Array4<f32> {
        match backbone {
            Some(bb) => bb.to_owned(),
            None => Array4::zeros((n, self.cfg.backbone_channels, h32, w32)),
        }
    }

    /// Feature map of the last decoder level, before the 1×1 saliency
    /// projection — the salnet half of the fused classifier. Evaluation
    /// mode; `None` backbone features mean the single-encoder ablation.
    pub fn forward_decoder_features(
        &self,
        images: ArrayView4<'_, f32>,
        backbone: Option<ArrayView4<'_, f32>>,
    ) -> Result<Array4<f32>> {
        self.validate_inputs(images, backbone.as_ref())?;
        let (n, _, h, w) = images.dim();
        let mut x = self.stem.forward(images);
        let mut skips = Vec::with_capacity(5);
        for i in 0..5 {
            let out = self.enc[i].forward_eval(x.view());
            x = self.down[i].forward(out.view());
            skips.push(out);
        }
        let bb = self.backbone_or_zeros(backbone, n, h / 32, w / 32);
        let cat = concat_channels(x.view(), bb.view());
        let mut f = self.fusion_bn.forward(self.fusion_conv.forward(cat.view()).view());
        relu_inplace(&mut f);
        let mut d = f;
        for i in 0..5 {
            d = self.dec[i].forward_eval(d.view(), skips[4 - i].view());
        }
        Ok(d)
    }

    /// Per-pixel saliency logits, evaluation mode. `None` backbone features
    /// mean the single-encoder ablation (zeros at the fusion).
    pub fn forward_logits(
        &self,
        images: ArrayView4<'_, f32>,
        backbone: Option<ArrayView4<'_, f32>>,
    ) -> Result<Array4<f32>> {
        let d = self.forward_decoder_features(images, backbone)?;
        Ok(self.final_conv.forward(d.view()))
    }

    /// Probability maps (one per image), evaluation mode.
    pub fn forward_saliency(
        &self,
        images: ArrayView4<'_, f32>,
        backbone: Option<ArrayView4<'_, f32>>,
    ) -> Result<Vec<SaliencyMap>> {
        let logits = self.forward_logits(images, backbone)?;
        logits_to_maps(&logits)
    }

    /// Training-mode forward; returns per-pixel logits and the caches for
    /// [`SaliencyNet::backward`].
    pub fn forward_train(
        &mut self,
        images: ArrayView4<'_, f32>,
        backbone: Option<ArrayView4<'_, f32>>,
    ) -> Result<(Array4<f32>, SalCache)> {
        self.validate_inputs(images, backbone.as_ref())?;
        let (n, _, h, w) = images.dim();
        let mut x = self.stem.forward(images);
        let mut skips = Vec::with_capacity(5);
        let mut enc_caches = Vec::with_capacity(5);
        for i in 0..5 {
            let (out, cache) = self.enc[i].forward_train(x.view());
            enc_caches.push(cache);
            x = self.down[i].forward(out.view());
            skips.push(out);
        }
        let bb = self.backbone_or_zeros(backbone, n, h / 32, w / 32);
        let cat = concat_channels(x.view(), bb.view());
        let zf = self.fusion_conv.forward(cat.view());
        let (mut f, fusion_bn) = self.fusion_bn.forward_train(zf.view());
        relu_inplace(&mut f);
        let mut d = f;
        let mut dec_caches = Vec::with_capacity(5);
        for i in 0..5 {
            let (out, cache) = self.dec[i].forward_train(d.view(), skips[4 - i].view());
            dec_caches.push(cache);
            d = out;
        }
        let logits = self.final_conv.forward(d.view());
        Ok((
            logits,
            SalCache {
                images: images.to_owned(),
                enc: enc_caches,
                skips,
                concat: cat,
                fusion_bn,
                dec: dec_caches,
            },
        ))
    }

    /// Backpropagate a logit gradient through decoder, fusion, and encoder.
    /// The gradient into the (frozen) backbone features is discarded.
    pub fn backward(&self, cache: &SalCache, d_logits: &Array4<f32>, grads: &mut GradStore) {
        let final_in = self.dec[4].bn_b.recompute_relu_output(&cache.dec[4].bn_b);
        let mut d = self
            .final_conv
            .backward(final_in.view(), d_logits, grads, true)
            .expect("dx");
        let mut d_skips: Vec<Option<Array4<f32>>> = (0..5).map(|_| None).collect();
        for i in (0..5).rev() {
            let (dx, dskip) = self.dec[i].backward(&cache.dec[i], &d, grads);
            d_skips[4 - i] = Some(dskip);
            d = dx;
        }
        let rf = self.fusion_bn.recompute_relu_output(&cache.fusion_bn);
        let dyf = relu_backward(&rf, &d);
        let dzf = self.fusion_bn.backward(&cache.fusion_bn, &dyf, grads);
        let dcat = self
            .fusion_conv
            .backward(cache.concat.view(), &dzf, grads, true)
            .expect("dx");
        let (mut d, _d_backbone) = split_channels(&dcat, self.cfg.channels[4]);
        for i in (0..5).rev() {
            let d_from_down = self.down[i]
                .backward(cache.skips[i].view(), &d, grads, true)
                .expect("dx");
            let d_total = d_from_down + &d_skips[i].take().expect("skip gradient");
            d = self.enc[i].backward(&cache.enc[i], &d_total, grads);
        }
        self.stem.backward(cache.images.view(), &d, grads, false);
    }
}

/// Spatial softmax of each image's logit plane, as validated maps.
pub fn logits_to_maps(logits: &Array4<f32>) -> Result<Vec<SaliencyMap>> {
    let n = logits.dim().0;
    (0..n)
        .map(|i| SaliencyMap::new(spatial_softmax(logits.slice(s![i, 0, .., ..]))))
        .collect()
}

impl Params for SaliencyNet {
    fn visit(&self, f: &mut dyn FnMut(&str, ArrayViewD<'_, f32>)) {
        self.stem.visit(f);
        for i in 0..5 {
            let b = &self.enc[i];
            match b.style {
                BlockStyle::ResSe => {
                    b.bn1.visit(f);
                    b.conv1.visit(f);
                    b.bn2.visit(f);
                    b.conv2.visit(f);
                    let se = b.se.as_ref().expect("residual style");
                    se.fc1.visit(f);
                    se.fc2.visit(f);
                }
                BlockStyle::Plain => {
                    b.conv1.visit(f);
                    b.bn1.visit(f);
                    b.conv2.visit(f);
                    b.bn2.visit(f);
                }
            }
            self.down[i].visit(f);
        }
        self.fusion_conv.visit(f);
        self.fusion_bn.visit(f);
        for d in &self.dec {
            d.conv_a.visit(f);
            d.bn_a.visit(f);
            d.conv_b.visit(f);
            d.bn_b.visit(f);
        }
        self.final_conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ArrayViewMutD<'_, f32>)) {
        self.stem.visit_mut(f);
        for i in 0..5 {
            let style = self.enc[i].style;
            let b = &mut self.enc[i];
            match style {
                BlockStyle::ResSe => {
                    b.bn1.visit_mut(f);
                    b.conv1.visit_mut(f);
                    b.bn2.visit_mut(f);
                    b.conv2.visit_mut(f);
                    let se = b.se.as_mut().expect("residual style");
                    se.fc1.visit_mut(f);
                    se.fc2.visit_mut(f);
                }
                BlockStyle::Plain => {
                    b.conv1.visit_mut(f);
                    b.bn1.visit_mut(f);
                    b.conv2.visit_mut(f);
                    b.bn2.visit_mut(f);
                }
            }
            self.down[i].visit_mut(f);
        }
        self.fusion_conv.visit_mut(f);
        self.fusion_bn.visit_mut(f);
        for d in &mut self.dec {
            d.conv_a.visit_mut(f);
            d.bn_a.visit_mut(f);
            d.conv_b.visit_mut(f);
            d.bn_b.visit_mut(f);
        }
        self.final_conv.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::kl_softmax_logit_grad;
    use crate::nn::digest_params;
    use crate::nn::testutil::{assert_all_close, check_directional_grad, rng};
    use rand::Rng;

    fn rand_batch(n: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut r = rng(seed);
        Array4::from_shape_simple_fn((n, 1, h, w), || r.gen_range(0.0f32..1.0))
    }

    fn rand_features(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut r = rng(seed);
        Array4::from_shape_simple_fn((n, c, h, w), || r.gen_range(-1.0f32..1.0))
    }

    fn desk_net(seed: u64) -> SaliencyNet {
        SaliencyNet::new(SalNetConfig::desk(8), &mut rng(seed)).unwrap()
    }

    #[test]
    fn maps_are_distributions_with_and_without_backbone() {
        let net = desk_net(0);
        let x = rand_batch(2, 64, 64, 1);
        let bb = rand_features(2, 8, 2, 2, 2);
        for backbone in [Some(bb.view()), None] {
            let maps = net.forward_saliency(x.view(), backbone).unwrap();
            assert_eq!(maps.len(), 2);
            for m in &maps {
                assert_eq!(m.weights().dim(), (64, 64));
                let sum: f64 = m.weights().iter().sum();
                assert!((sum - 1.0).abs() < 1e-5, "{sum}");
                assert!(m.weights().iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zeroed_final_layer_gives_uniform_map() {
        let mut net = desk_net(3);
        net.final_conv.weight.fill(0.0);
        net.final_conv.bias.as_mut().unwrap().fill(0.0);
        let x = rand_batch(1, 64, 64, 4);
        let maps = net.forward_saliency(x.view(), None).unwrap();
        let expected = 1.0 / (64.0 * 64.0);
        for &v in maps[0].weights().iter() {
            assert!((v - expected).abs() < 1e-10, "{v} vs {expected}");
        }
    }

    #[test]
    fn plain_block_style_also_normalizes() {
        let cfg = SalNetConfig { block_style: BlockStyle::Plain, ..SalNetConfig::desk(8) };
        let net = SaliencyNet::new(cfg, &mut rng(5)).unwrap();
        let x = rand_batch(1, 64, 64, 6);
        let maps = net.forward_saliency(x.view(), None).unwrap();
        let sum: f64 = maps[0].weights().iter().sum();
        assert!((sum - 1.0).abs() < 1e-5);
    }

    #[test]
    fn rejects_mismatched_backbone_grid() {
        let net = desk_net(7);
        let x = rand_batch(1, 64, 64, 8);
        let wrong_spatial = rand_features(1, 8, 4, 4, 9);
        assert!(net.forward_saliency(x.view(), Some(wrong_spatial.view())).is_err());
        let wrong_channels = rand_features(1, 16, 2, 2, 10);
        assert!(net.forward_saliency(x.view(), Some(wrong_channels.view())).is_err());
    }

    #[test]
    fn rejects_indivisible_se_ratio() {
        let cfg = SalNetConfig {
            channels: [6, 8, 16, 32, 64],
            ..SalNetConfig::desk(8)
        };
        assert!(SaliencyNet::new(cfg, &mut rng(0)).is_err());
    }

    #[test]
    fn se_gates_lie_strictly_inside_unit_interval() {
        let mut r = rng(11);
        let se = SeGate::new("test", 8, 4, &mut r);
        let x = rand_features(2, 8, 4, 4, 12);
        let (_, _, gate) = se.gates(x.view());
        for &g in gate.iter() {
            assert!(g > 0.0 && g < 1.0, "{g}");
        }
        // gating never changes activation sign
        let y = se.forward_eval(x.view());
        for (&yv, &xv) in y.iter().zip(x.iter()) {
            assert!(yv.signum() == xv.signum() || yv == 0.0);
        }
    }

    #[test]
    fn saturated_se_gate_is_identity() {
        let mut r = rng(13);
        let mut se = SeGate::new("test", 8, 4, &mut r);
        // zero the excitation weights and push the bias far positive:
        // sigmoid saturates to 1 and the gate passes activations through
        se.fc2.weight.fill(0.0);
        se.fc2.bias.fill(30.0);
        let x = rand_features(1, 8, 4, 4, 14);
        let y = se.forward_eval(x.view());
        for (&yv, &xv) in y.iter().zip(x.iter()) {
            assert!((yv - xv).abs() < 1e-6);
        }
    }

    #[test]
    fn doubling_input_doubles_squeeze_vector() {
        let mut r = rng(15);
        let se = SeGate::new("test", 8, 4, &mut r);
        let x = rand_features(1, 8, 4, 4, 16);
        let doubled = x.mapv(|v| v * 2.0);
        let (gap1, _, _) = se.gates(x.view());
        let (gap2, _, _) = se.gates(doubled.view());
        for (&a, &b) in gap1.iter().zip(gap2.iter()) {
            assert_eq!(b, 2.0 * a);
        }
    }

    #[test]
    fn residual_block_preserves_shape() {
        let mut r = rng(17);
        let mut block = EncBlock::new("test", 8, BlockStyle::ResSe, 4, &mut r);
        let x = rand_features(2, 8, 8, 8, 18);
        let y = block.forward_eval(x.view());
        assert_eq!(y.dim(), x.dim());
        let (yt, _) = block.forward_train(x.view());
        assert_eq!(yt.dim(), x.dim());
    }

    #[test]
    fn kl_gradient_reaches_first_encoder_level() {
        let mut net = desk_net(19);
        let x = rand_batch(1, 64, 64, 20);
        let (logits, cache) = net.forward_train(x.view(), None).unwrap();
        let p = spatial_softmax(logits.slice(s![0, 0, .., ..]));
        // peaked target in one corner
        let mut t = ndarray::Array2::<f64>::zeros((64, 64));
        t[[8, 8]] = 1.0;
        let g = kl_softmax_logit_grad(&p, &t, 1e-8);
        let mut d_logits = Array4::<f32>::zeros(logits.raw_dim());
        for ((r, c), &v) in g.indexed_iter() {
            d_logits[[0, 0, r, c]] = v as f32;
        }
        let mut grads = GradStore::new();
        net.backward(&cache, &d_logits, &mut grads);
        assert!(grads.l2_norm_of_prefix("salnet.enc0.") > 0.0);
        assert!(grads.l2_norm_of_prefix("salnet.stem") > 0.0);
        assert!(grads.l2_norm_of_prefix("salnet.dec4.") > 0.0);
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        for style in [BlockStyle::ResSe, BlockStyle::Plain] {
            let cfg = SalNetConfig { block_style: style, ..SalNetConfig::desk(8) };
            let net = SaliencyNet::new(cfg, &mut rng(21)).unwrap();
            // batch of 2 so the bottleneck batch norm sees more than one
            // value per channel (a single value normalizes to zero and
            // legitimately has zero gradient)
            let x = rand_batch(2, 32, 32, 22);
            let bb = rand_features(2, 8, 1, 1, 23);
            let mut r = rng(24);
            let w = Array4::from_shape_simple_fn((2, 1, 32, 32), || r.gen_range(-1.0f32..1.0));

            let loss = |m: &SaliencyNet| {
                let mut probe = m.clone();
                let (logits, _) = probe.forward_train(x.view(), Some(bb.view())).unwrap();
                logits
                    .iter()
                    .zip(w.iter())
                    .map(|(&l, &p)| l as f64 * p as f64)
                    .sum::<f64>()
            };
            let mut grads = GradStore::new();
            {
                let mut probe = net.clone();
                let (_, cache) = probe.forward_train(x.view(), Some(bb.view())).unwrap();
                probe.backward(&cache, &w, &mut grads);
            }
            // The residual style is probed end to end; tolerances widen with
            // distance from the loss because the finite difference crosses
            // more ReLU kinks the deeper the parameter sits. The plain style
            // has no identity bypass, so a perturbation upstream of the
            // bottleneck gets renormalized by every batch norm that follows
            // and its f32 loss surface is too rough to finite-difference at
            // any step size; its encoder wiring is checked block-by-block in
            // `encoder_block_gradients_match_finite_differences`, and here
            // only the decoder path is differenced while the encoder is
            // required to receive gradient at all.
            let names: &[(&str, f64)] = match style {
                BlockStyle::ResSe => &[
                    ("salnet.stem.weight", 0.15),
                    ("salnet.enc0.conv1.weight", 0.15),
                    ("salnet.down2.weight", 0.08),
                    ("salnet.fusion.conv.weight", 0.08),
                    ("salnet.dec0.conv_b.weight", 0.05),
                    ("salnet.final.bias", 3e-2),
                ],
                BlockStyle::Plain => &[
                    ("salnet.dec0.conv_b.weight", 0.05),
                    ("salnet.final.bias", 3e-2),
                ],
            };
            for (name, tol) in names {
                check_directional_grad(&net, &grads, name, &loss, 2.5e-4, *tol);
            }
            for prefix in ["salnet.stem", "salnet.enc0.", "salnet.down2", "salnet.fusion."] {
                assert!(
                    grads.l2_norm_of_prefix(prefix) > 0.0,
                    "{prefix} received no gradient"
                );
            }
        }
    }

    /// Maps a visit-style tensor name onto the matching block field so the
    /// finite-difference loop below can perturb single entries.
    fn block_tensor_mut<'a>(b: &'a mut EncBlock, name: &str) -> ArrayViewMutD<'a, f32> {
        match name {
            "blk.conv1.weight" => b.conv1.weight.view_mut().into_dyn(),
            "blk.bn1.weight" => b.bn1.gamma.view_mut().into_dyn(),
            "blk.bn1.bias" => b.bn1.beta.view_mut().into_dyn(),
            "blk.conv2.weight" => b.conv2.weight.view_mut().into_dyn(),
            "blk.bn2.weight" => b.bn2.gamma.view_mut().into_dyn(),
            "blk.bn2.bias" => b.bn2.beta.view_mut().into_dyn(),
            "blk.se.fc1.weight" => b.se.as_mut().unwrap().fc1.weight.view_mut().into_dyn(),
            "blk.se.fc1.bias" => b.se.as_mut().unwrap().fc1.bias.view_mut().into_dyn(),
            "blk.se.fc2.weight" => b.se.as_mut().unwrap().fc2.weight.view_mut().into_dyn(),
            "blk.se.fc2.bias" => b.se.as_mut().unwrap().fc2.bias.view_mut().into_dyn(),
            other => panic!("unknown block tensor {other}"),
        }
    }

    #[test]
    fn encoder_block_gradients_match_finite_differences() {
        // A single block is smooth enough for entry-wise central differences
        // even in the plain style, so this pins down exactly the wiring that
        // the end-to-end probe above cannot reach for plain networks.
        for style in [BlockStyle::ResSe, BlockStyle::Plain] {
            let mut r = rng(41);
            let block = EncBlock::new("blk", 4, style, 2, &mut r);
            let mut rx = rng(42);
            let x = Array4::from_shape_simple_fn((2, 4, 6, 6), || rx.gen_range(-1.0f32..1.0));
            let mut rw = rng(43);
            let w = Array4::from_shape_simple_fn((2, 4, 6, 6), || rw.gen_range(-1.0f32..1.0));

            let loss = |b: &EncBlock, input: &Array4<f32>| -> f64 {
                let mut probe = b.clone();
                let (y, _) = probe.forward_train(input.view());
                y.iter()
                    .zip(w.iter())
                    .map(|(&v, &p)| v as f64 * p as f64)
                    .sum()
            };

            let mut grads = GradStore::new();
            let dx = {
                let mut probe = block.clone();
                let (_, cache) = probe.forward_train(x.view());
                probe.backward(&cache, &w, &mut grads)
            };

            // Each tensor kind has its own workable step size: weight
            // entries need a larger step so the difference rises above the
            // f32 forward noise of the six-op chain, while a bias step moves
            // an entire channel across ReLU kinks and needs a smaller one.
            // The difference is therefore taken at several steps and each
            // element keeps its closest match; a wrong gradient would
            // disagree at every step size.
            let eps_set = [5e-3f32, 2.5e-3, 1.25e-3, 6.25e-4, 3.125e-4, 1.5e-4, 7.5e-5];
            let names: &[&str] = match style {
                BlockStyle::ResSe => &[
                    "blk.bn1.weight",
                    "blk.bn1.bias",
                    "blk.conv1.weight",
                    "blk.bn2.weight",
                    "blk.bn2.bias",
                    "blk.conv2.weight",
                    "blk.se.fc1.weight",
                    "blk.se.fc1.bias",
                    "blk.se.fc2.weight",
                    "blk.se.fc2.bias",
                ],
                BlockStyle::Plain => &[
                    "blk.conv1.weight",
                    "blk.bn1.weight",
                    "blk.bn1.bias",
                    "blk.conv2.weight",
                    "blk.bn2.weight",
                    "blk.bn2.bias",
                ],
            };
            for name in names {
                let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
                let mut fd = g.clone();
                for idx in ndarray::indices(g.raw_dim()) {
                    let diff = |eps: f32| -> f32 {
                        let eval = |delta: f32| -> f64 {
                            let mut b2 = block.clone();
                            block_tensor_mut(&mut b2, name)[&idx] += delta;
                            loss(&b2, &x)
                        };
                        ((eval(eps) - eval(-eps)) / (2.0 * eps as f64)) as f32
                    };
                    let a = g[&idx];
                    fd[&idx] = eps_set
                        .iter()
                        .map(|&e| diff(e))
                        .min_by(|p, q| (p - a).abs().total_cmp(&(q - a).abs()))
                        .unwrap();
                }
                assert_all_close(g, &fd, 2e-2, 2e-3);
            }

            // input gradient, which downstream blocks rely on
            let mut fd_dx = Array4::<f32>::zeros(x.raw_dim());
            for idx in ndarray::indices(x.raw_dim()) {
                let diff = |eps: f32| -> f32 {
                    let eval = |delta: f32| -> f64 {
                        let mut x2 = x.clone();
                        x2[idx] += delta;
                        loss(&block, &x2)
                    };
                    ((eval(eps) - eval(-eps)) / (2.0 * eps as f64)) as f32
                };
                let a = dx[idx];
                fd_dx[idx] = eps_set
                    .iter()
                    .map(|&e| diff(e))
                    .min_by(|p, q| (p - a).abs().total_cmp(&(q - a).abs()))
                    .unwrap();
            }
            assert_all_close(&dx.into_dyn(), &fd_dx.into_dyn(), 2e-2, 2e-3);
        }
    }

    #[test]
    fn eval_forward_is_pure_and_deterministic() {
        let net = desk_net(25);
        let before = digest_params(&net, "salnet.");
        let x = rand_batch(1, 64, 64, 26);
        let a = net.forward_logits(x.view(), None).unwrap();
        let b = net.forward_logits(x.view(), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(before, digest_params(&net, "salnet."));
    }
}

