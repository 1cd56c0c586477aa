//! Run configuration: TOML with dotted-key overrides and a content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ExtractorKind;
use crate::dataio::PatchSource;
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalParams, LossWeights};
use crate::metrics::EvalOptions;
use crate::prompts::{EncoderKind, Fusion, Pooling};
use crate::segmentor::SegmentorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub kind: ExtractorKind,
    /// Safetensors file for the pretrained adapter.
    pub weights_path: Option<PathBuf>,
    /// Seed of the stand-in extractor's fixed weights.
    pub standin_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { kind: ExtractorKind::Standin, weights_path: None, standin_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub encoder: EncoderKind,
    /// JSON table of precomputed text-tower embeddings, required by `clip_frozen`.
    pub embeddings_path: Option<PathBuf>,
    /// Prompt registry; the built-in table is used when absent.
    pub registry_path: Option<PathBuf>,
    pub pooling: Pooling,
    pub fusion: Fusion,
    pub stub_seed: u64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Stub,
            embeddings_path: None,
            registry_path: None,
            pooling: Pooling::Mean,
            fusion: Fusion::Add,
            stub_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_mse: f64,
    pub w_dice: f64,
    pub w_focal: f64,
    pub w_diffusion: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub alpha_balanced: bool,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let (w, f) = (LossWeights::default(), FocalParams::default());
        Self {
            w_mse: w.w_mse,
            w_dice: w.w_dice,
            w_focal: w.w_focal,
            w_diffusion: w.w_diffusion,
            alpha: f.alpha,
            gamma: f.gamma,
            alpha_balanced: f.alpha_balanced,
            dice_smooth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { w_mse: self.w_mse, w_dice: self.w_dice, w_focal: self.w_focal, w_diffusion: self.w_diffusion }
    }

    pub fn focal(&self) -> FocalParams {
        FocalParams { alpha: self.alpha, gamma: self.gamma, alpha_balanced: self.alpha_balanced }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_vlm: bool,
    pub use_focal: bool,
    pub use_segmentor: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { use_vlm: true, use_focal: true, use_segmentor: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepLr {
    pub step_size: usize,
    pub decay: f64,
}

impl Default for StepLr {
    fn default() -> Self {
        Self { step_size: 800, decay: 0.1 }
    }
}

/// Where pasted patches come from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSourcing {
    #[serde(rename = "self")]
    SelfImage,
    OtherSample,
    /// Each pseudo-anomaly picks one of the two at random.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoAnomalyConfig {
    pub min_area_fraction: f64,
    pub max_area_fraction: f64,
    pub patch_source: PatchSourcing,
    pub rotate: bool,
}

impl Default for PseudoAnomalyConfig {
    fn default() -> Self {
        Self { min_area_fraction: 0.01, max_area_fraction: 0.08, patch_source: PatchSourcing::Mixed, rotate: true }
    }
}

impl PseudoAnomalyConfig {
    pub fn source(&self, other: bool) -> PatchSource {
        match (self.patch_source, other) {
            (PatchSourcing::SelfImage, _) | (PatchSourcing::Mixed, false) => PatchSource::SelfImage,
            _ => PatchSource::OtherSample,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_lr: StepLr,
    pub batch_size: usize,
    pub seed: u64,
    pub toggles: Toggles,
    pub pseudo_anomaly_ratio: f64,
    pub pseudo_anomaly: PseudoAnomalyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            lr: 1e-4,
            weight_decay: 1e-5,
            step_lr: StepLr::default(),
            batch_size: 8,
            seed: 0,
            toggles: Toggles::default(),
            pseudo_anomaly_ratio: 0.5,
            pseudo_anomaly: PseudoAnomalyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_lr.step_size == 0 {
            return bad("train.epochs, train.batch_size and train.step_lr.step_size must be at least 1".into());
        }
        if !(self.step_lr.decay > 0.0 && self.step_lr.decay <= 1.0) {
            return bad(format!("train.step_lr.decay must be in (0, 1], got {}", self.step_lr.decay));
        }
        if !(0.0..=1.0).contains(&self.pseudo_anomaly_ratio) {
            return bad(format!("train.pseudo_anomaly_ratio must be in [0, 1], got {}", self.pseudo_anomaly_ratio));
        }
        if self.weight_decay < 0.0 {
            return bad("train.weight_decay must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub backbone: BackboneConfig,
    pub prompts: PromptConfig,
    pub decoder: DecoderConfig,
    pub segmentor: SegmentorConfig,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Config {
    /// Parses TOML, applies `key=value` overrides in order and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        // typed parse first so unknown keys and type errors carry line numbers
        let _: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Config = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.decoder.validate()?;
        self.losses.weights().validate()?;
        self.losses.focal().validate()?;
        if self.losses.dice_smooth <= 0.0 {
            return Err(Error::Config("losses.dice_smooth must be positive".into()));
        }
        if self.backbone.kind == ExtractorKind::Pretrained && self.backbone.weights_path.is_none() {
            return Err(Error::Config("backbone.kind = pretrained needs backbone.weights_path".into()));
        }
        if self.prompts.encoder == EncoderKind::ClipFrozen && self.prompts.embeddings_path.is_none() {
            return Err(Error::Config("prompts.encoder = clip_frozen needs prompts.embeddings_path".into()));
        }
        Ok(())
    }

    /// Canonical TOML: every field, fixed order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// sha256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.to_toml().as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `a.b.c=v`; `v` is read as a TOML value and falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let parsed: toml::Table = toml::from_str(&format!("v = {raw}")).unwrap_or_else(|_| {
        let mut t = toml::Table::new();
        t.insert("v".into(), toml::Value::String(raw.to_string()));
        t
    });
    let value = parsed["v"].clone();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Learning rate after `epoch` completed epochs under the step schedule.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr * cfg.step_lr.decay.powi((epoch / cfg.step_lr.step_size) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_hash_is_stable() -> Result<()> {
        let c = Config::default();
        let back = Config::from_toml_str(&c.to_toml())?;
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(Config::from_toml_str("")?, c);
        Ok(())
    }

    #[test]
    fn overrides_apply_dotted_keys() -> Result<()> {
        let c = Config::from_toml_with_overrides(
            "[losses]\ngamma = 2.0\n",
            &["losses.gamma=0".into(), "train.toggles.use_vlm=false".into(), "prompts.fusion=mul".into()],
        )?;
        assert_eq!(c.losses.gamma, 0.0);
        assert!(!c.train.toggles.use_vlm);
        assert_eq!(c.prompts.fusion, Fusion::Mul);
        assert_ne!(c.hash(), Config::default().hash());
        assert!(Config::from_toml_with_overrides("", &["nonsense".into()]).is_err());
        assert!(Config::from_toml_with_overrides("", &["train.bogus=1".into()]).is_err());
        Ok(())
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Config::from_toml_str("[train]\nepochs = 3\nlr = = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let err = Config::from_toml_str("[train]\nepochs = 3\nwarmup = 1\n").unwrap_err().to_string();
        assert!(err.contains("warmup") && err.contains("line 3"), "{err}");
    }

    #[test]
    fn step_schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at_epoch(&c, 0), 1e-4);
        assert_eq!(lr_at_epoch(&c, 799), 1e-4);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
        assert!(close(lr_at_epoch(&c, 800), 1e-5));
        // floor(1599 / 800) = 1: the second decay lands at epoch 1600
        assert!(close(lr_at_epoch(&c, 1599), 1e-5));
        assert!(close(lr_at_epoch(&c, 1600), 1e-6));
    }

    #[test]
    fn validation_rejects_bad_values() {
        for o in ["train.lr=0", "train.epochs=0", "train.step_lr.decay=1.5", "losses.w_mse=0"] {
            let mut ov = vec![o.to_string()];
            if o.starts_with("losses") {
                ov.extend(["losses.w_dice=0", "losses.w_focal=0", "losses.w_diffusion=0"].map(String::from));
            }
            assert!(Config::from_toml_with_overrides("", &ov).is_err(), "{o}");
        }
    }
}
