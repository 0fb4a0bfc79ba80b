//! Experiment configuration: a flat `key = value` file with typed fields,
//! strict unknown-key rejection, and a canonical serialization whose SHA-256
//! digest ties checkpoints to the configuration that produced them.
//!
//! Two digests matter. [`ExpConfig::digest`] covers every key and records
//! provenance. [`ExpConfig::arch_digest`] covers only the keys that determine
//! the parameter shapes and semantics of the namespaces a given stage
//! archives, so a Stage-1b checkpoint trained once can seed several saliency
//! variants that differ only in decoder style.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::models::{BackboneConfig, BlockStyle, FusionConfig, SalNetConfig};
use crate::nn::AdamConfig;
use crate::{Error, Result};

use super::StageKind;

/// Backbone scale: the full 201-layer network or the reduced desk variant
/// for CPU-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackbonePreset {
    Full,
    Desk,
}

impl BackbonePreset {
    fn as_str(self) -> &'static str {
        match self {
            BackbonePreset::Full => "full",
            BackbonePreset::Desk => "desk",
        }
    }
}

/// Saliency decoder block style, mirroring [`BlockStyle`] at the config
/// surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SalStyle {
    ResSe,
    Plain,
}

impl SalStyle {
    fn as_str(self) -> &'static str {
        match self {
            SalStyle::ResSe => "res_se",
            SalStyle::Plain => "plain",
        }
    }
}

/// Every tunable of a training run. Field defaults reproduce the reference
/// experiment; the desk preset shrinks the models and the input resolution
/// so the whole schedule runs on a CPU in minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpConfig {
    pub backbone_preset: BackbonePreset,
    pub sal_style: SalStyle,
    /// Feed frozen backbone features into the saliency bottleneck. Off for
    /// the single-encoder ablations.
    pub dual_encoder: bool,
    pub fusion_dropout: f64,
    pub triplet_margin: f64,
    pub kl_epsilon: f64,
    /// Default epoch budget for every stage; the per-stage overrides below
    /// take precedence when nonzero.
    pub epochs: usize,
    pub epochs_stage1a: usize,
    pub epochs_stage1b: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    /// Minimum validation-loss drop that counts as an improvement for the
    /// patience counter.
    pub min_delta: f64,
    /// Fraction of training records carved into a validation split when the
    /// manifest has none.
    pub val_fraction: f64,
    pub seed: u64,
    /// Integer input downscale (1, 2, or 4); 640×512 becomes 160×128 at 4.
    pub downscale: usize,
    /// Cap on training records per stage, 0 for no cap.
    pub max_records: usize,
}

impl Default for ExpConfig {
    fn default() -> Self {
        Self {
            backbone_preset: BackbonePreset::Full,
            sal_style: SalStyle::ResSe,
            dual_encoder: true,
            fusion_dropout: 0.3,
            triplet_margin: 0.2,
            kl_epsilon: 1e-8,
            epochs: 50,
            epochs_stage1a: 0,
            epochs_stage1b: 0,
            epochs_stage2: 0,
            epochs_stage3: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            patience: 10,
            min_delta: 1e-6,
            val_fraction: 0.1,
            seed: 0,
            downscale: 1,
            max_records: 0,
        }
    }
}

/// All recognized keys, in canonical (sorted) order.
const KEYS: &[&str] = &[
    "backbone.preset",
    "fusion.dropout",
    "loss.kl_epsilon",
    "loss.triplet_margin",
    "salnet.dual_encoder",
    "salnet.style",
    "train.adam_eps",
    "train.batch_size",
    "train.beta1",
    "train.beta2",
    "train.downscale",
    "train.epochs",
    "train.epochs_stage1a",
    "train.epochs_stage1b",
    "train.epochs_stage2",
    "train.epochs_stage3",
    "train.lr",
    "train.max_records",
    "train.min_delta",
    "train.patience",
    "train.seed",
    "train.val_fraction",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "invalid value `{other}` for key `{key}` (expected true or false)"
        ))),
    }
}

impl ExpConfig {
    /// Desk-scale preset: reduced model widths and 4× input downscale.
    pub fn desk() -> Self {
        Self {
            backbone_preset: BackbonePreset::Desk,
            downscale: 4,
            ..Self::default()
        }
    }

    /// Set one key. Unknown keys and malformed values are configuration
    /// errors naming the offender.
    pub fn apply_set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone.preset" => {
                self.backbone_preset = match value.trim() {
                    "full" => BackbonePreset::Full,
                    "desk" => BackbonePreset::Desk,
                    other => {
                        return Err(Error::Config(format!(
                            "invalid value `{other}` for key `backbone.preset` (expected full or desk)"
                        )))
                    }
                }
            }
            "salnet.style" => {
                self.sal_style = match value.trim() {
                    "res_se" => SalStyle::ResSe,
                    "plain" => SalStyle::Plain,
                    other => {
                        return Err(Error::Config(format!(
                            "invalid value `{other}` for key `salnet.style` (expected res_se or plain)"
                        )))
                    }
                }
            }
            "salnet.dual_encoder" => self.dual_encoder = parse_bool(key, value)?,
            "fusion.dropout" => self.fusion_dropout = parse_num(key, value)?,
            "loss.triplet_margin" => self.triplet_margin = parse_num(key, value)?,
            "loss.kl_epsilon" => self.kl_epsilon = parse_num(key, value)?,
            "train.epochs" => self.epochs = parse_num(key, value)?,
            "train.epochs_stage1a" => self.epochs_stage1a = parse_num(key, value)?,
            "train.epochs_stage1b" => self.epochs_stage1b = parse_num(key, value)?,
            "train.epochs_stage2" => self.epochs_stage2 = parse_num(key, value)?,
            "train.epochs_stage3" => self.epochs_stage3 = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.beta1" => self.beta1 = parse_num(key, value)?,
            "train.beta2" => self.beta2 = parse_num(key, value)?,
            "train.adam_eps" => self.adam_eps = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.patience" => self.patience = parse_num(key, value)?,
            "train.min_delta" => self.min_delta = parse_num(key, value)?,
            "train.val_fraction" => self.val_fraction = parse_num(key, value)?,
            "train.seed" => self.seed = parse_num(key, value)?,
            "train.downscale" => self.downscale = parse_num(key, value)?,
            "train.max_records" => self.max_records = parse_num(key, value)?,
            other => {
                return Err(Error::Config(format!("unknown configuration key `{other}`")))
            }
        }
        Ok(())
    }

    /// Parse a configuration body: one `key = value` per line, `#` comments,
    /// blank lines ignored, later occurrences of a key win.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got `{line}`",
                    lineno + 1
                )));
            };
            cfg.apply_set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read and parse a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "backbone.preset" => self.backbone_preset.as_str().to_string(),
            "salnet.style" => self.sal_style.as_str().to_string(),
            "salnet.dual_encoder" => self.dual_encoder.to_string(),
            "fusion.dropout" => self.fusion_dropout.to_string(),
            "loss.triplet_margin" => self.triplet_margin.to_string(),
            "loss.kl_epsilon" => self.kl_epsilon.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.epochs_stage1a" => self.epochs_stage1a.to_string(),
            "train.epochs_stage1b" => self.epochs_stage1b.to_string(),
            "train.epochs_stage2" => self.epochs_stage2.to_string(),
            "train.epochs_stage3" => self.epochs_stage3.to_string(),
            "train.lr" => self.lr.to_string(),
            "train.beta1" => self.beta1.to_string(),
            "train.beta2" => self.beta2.to_string(),
            "train.adam_eps" => self.adam_eps.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.patience" => self.patience.to_string(),
            "train.min_delta" => self.min_delta.to_string(),
            "train.val_fraction" => self.val_fraction.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.downscale" => self.downscale.to_string(),
            "train.max_records" => self.max_records.to_string(),
            other => unreachable!("unlisted key {other}"),
        }
    }

    /// Canonical text form: every key in sorted order, one per line.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.value_of(key));
        }
        out
    }

    /// SHA-256 of the canonical text, hex-encoded.
    pub fn digest(&self) -> String {
        hex_sha256(self.canonical_text().as_bytes())
    }

    /// Digest of the keys that fix the parameter shapes and semantics of the
    /// namespaces archived by `stage`. Stage-1 checkpoints depend only on
    /// the backbone preset, so they can seed any saliency variant; stage-2
    /// and stage-3 checkpoints also pin the decoder style and the encoder
    /// wiring their saliency weights were trained under.
    pub fn arch_digest(&self, stage: StageKind) -> String {
        let keys: &[&str] = match stage {
            StageKind::Stage1a | StageKind::Stage1b => &["backbone.preset"],
            StageKind::Stage2 | StageKind::Stage3 => {
                &["backbone.preset", "salnet.dual_encoder", "salnet.style"]
            }
        };
        let mut text = String::new();
        for key in keys {
            let _ = writeln!(text, "{key} = {}", self.value_of(key));
        }
        hex_sha256(text.as_bytes())
    }

    /// Reject out-of-range values with an error naming the key.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fusion_dropout) {
            return Err(Error::Config("fusion.dropout must be in [0, 1)".into()));
        }
        if self.triplet_margin <= 0.0 {
            return Err(Error::Config("loss.triplet_margin must be positive".into()));
        }
        if self.kl_epsilon <= 0.0 {
            return Err(Error::Config("loss.kl_epsilon must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("train.adam_eps must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.min_delta < 0.0 {
            return Err(Error::Config("train.min_delta must be nonnegative".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::Config("train.val_fraction must be in [0, 0.5]".into()));
        }
        if ![1, 2, 4].contains(&self.downscale) {
            return Err(Error::Config("train.downscale must be 1, 2, or 4".into()));
        }
        Ok(())
    }

    /// Epoch budget for one stage: the per-stage override when set, the
    /// global `train.epochs` otherwise.
    pub fn epochs_for(&self, stage: StageKind) -> usize {
        let specific = match stage {
            StageKind::Stage1a => self.epochs_stage1a,
            StageKind::Stage1b => self.epochs_stage1b,
            StageKind::Stage2 => self.epochs_stage2,
            StageKind::Stage3 => self.epochs_stage3,
        };
        if specific > 0 {
            specific
        } else {
            self.epochs
        }
    }

    /// Input height and width after downscaling.
    pub fn input_dims(&self) -> (usize, usize) {
        (crate::CANON_H / self.downscale, crate::CANON_W / self.downscale)
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        match self.backbone_preset {
            BackbonePreset::Full => BackboneConfig::densenet201(),
            BackbonePreset::Desk => BackboneConfig::desk(),
        }
    }

    pub fn salnet_config(&self) -> SalNetConfig {
        let bb = self.backbone_config().feature_channels();
        let base = match self.backbone_preset {
            BackbonePreset::Full => SalNetConfig::res_se_unet(bb),
            BackbonePreset::Desk => SalNetConfig::desk(bb),
        };
        SalNetConfig {
            block_style: match self.sal_style {
                SalStyle::ResSe => BlockStyle::ResSe,
                SalStyle::Plain => BlockStyle::Plain,
            },
            ..base
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        let bb = self.backbone_config().feature_channels();
        let dec = self.salnet_config().channels[0];
        FusionConfig {
            dropout: self.fusion_dropout as f32,
            ..FusionConfig::for_dims(bb, dec)
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr as f32,
            beta1: self.beta1 as f32,
            beta2: self.beta2 as f32,
            eps: self.adam_eps as f32,
        }
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrips_through_canonical_text() {
        let mut cfg = ExpConfig::desk();
        cfg.apply_set("train.seed", "7").unwrap();
        cfg.apply_set("salnet.style", "plain").unwrap();
        cfg.apply_set("train.lr", "0.001").unwrap();
        let reparsed = ExpConfig::parse(&cfg.canonical_text()).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(cfg.digest(), reparsed.digest());
    }

    #[test]
    fn rejects_unknown_keys_by_name() {
        let err = ExpConfig::parse("train.momentum = 0.9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.momentum"), "{msg}");
    }

    #[test]
    fn rejects_malformed_lines_and_values() {
        assert!(ExpConfig::parse("train.epochs\n").is_err());
        assert!(ExpConfig::parse("train.epochs = many\n").is_err());
        assert!(ExpConfig::parse("train.downscale = 3\n").is_err());
        assert!(ExpConfig::parse("salnet.dual_encoder = yes\n").is_err());
    }

    #[test]
    fn ignores_comments_and_blank_lines_and_lets_later_keys_win() {
        let cfg = ExpConfig::parse(
            "# experiment\n\ntrain.seed = 1\ntrain.seed = 2  # override\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 2);
    }

    #[test]
    fn digest_changes_with_any_key() {
        let base = ExpConfig::default();
        let mut other = base.clone();
        other.apply_set("train.patience", "11").unwrap();
        assert_ne!(base.digest(), other.digest());
    }

    #[test]
    fn arch_digest_ignores_training_keys_but_tracks_architecture() {
        let base = ExpConfig::desk();
        let mut tuned = base.clone();
        tuned.apply_set("train.lr", "0.01").unwrap();
        tuned.apply_set("train.epochs", "3").unwrap();
        for stage in [
            StageKind::Stage1a,
            StageKind::Stage1b,
            StageKind::Stage2,
            StageKind::Stage3,
        ] {
            assert_eq!(base.arch_digest(stage), tuned.arch_digest(stage));
        }

        let mut plain = base.clone();
        plain.apply_set("salnet.style", "plain").unwrap();
        // stage-1 checkpoints carry no saliency weights, so they are shared
        assert_eq!(base.arch_digest(StageKind::Stage1b), plain.arch_digest(StageKind::Stage1b));
        assert_ne!(base.arch_digest(StageKind::Stage2), plain.arch_digest(StageKind::Stage2));

        let mut full = base.clone();
        full.apply_set("backbone.preset", "full").unwrap();
        assert_ne!(base.arch_digest(StageKind::Stage1a), full.arch_digest(StageKind::Stage1a));
    }

    #[test]
    fn per_stage_epoch_overrides_inherit_from_the_global_default() {
        let mut cfg = ExpConfig::default();
        cfg.apply_set("train.epochs", "40").unwrap();
        cfg.apply_set("train.epochs_stage2", "12").unwrap();
        assert_eq!(cfg.epochs_for(StageKind::Stage1a), 40);
        assert_eq!(cfg.epochs_for(StageKind::Stage2), 12);
    }

    #[test]
    fn presets_build_matching_model_configs() {
        let desk = ExpConfig::desk();
        let bb = desk.backbone_config();
        let sal = desk.salnet_config();
        assert_eq!(sal.backbone_channels, bb.feature_channels());
        let fusion = desk.fusion_config();
        assert_eq!(fusion.backbone_dim, bb.feature_channels());
        assert_eq!(fusion.decoder_dim, sal.channels[0]);
        assert_eq!(desk.input_dims(), (160, 128));
    }
}
