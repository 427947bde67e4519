//! Flat JSON run configuration.
//!
//! Every key is optional and falls back to its default; unknown keys are
//! rejected so that typos surface as errors instead of silent defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::StrongPolicy;
use crate::error::{Error, Result};
use crate::evaluate::{FlipMode, TtaPolicy};
use crate::losses::LdNormalize;
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub tau: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub lr: f64,
    pub head_lr_mult: f64,
    pub momentum: f64,
    pub batch_clean: usize,
    pub batch_degraded: usize,
    pub epochs: usize,
    pub crop: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub mode: TrainMode,
    pub deterministic: bool,
    pub keep_prob: f64,
    pub ld_normalize: LdNormalize,
    pub burnin_steps: u64,

    pub strong_p_jitter: f64,
    pub strong_brightness: (f64, f64),
    pub strong_contrast: (f64, f64),
    pub strong_p_gray: f64,
    pub strong_p_blur: f64,
    pub strong_blur_sigma: (f64, f64),
    pub strong_cutmix: bool,
    pub strong_p_cutmix: f64,

    pub tta_flips: FlipMode,
    pub tta_scales: Vec<f64>,

    pub train_shard: PathBuf,
    pub val_shard: PathBuf,
    pub test_shard: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from_parts(
            &TrainConfig::default(),
            &TtaPolicy::default(),
            PathBuf::from("data/train.wps"),
            PathBuf::from("data/val.wps"),
            PathBuf::from("data/test.wps"),
            PathBuf::from("runs"),
        )
    }
}

impl ConfigFile {
    pub fn from_parts(
        train: &TrainConfig,
        tta: &TtaPolicy,
        train_shard: PathBuf,
        val_shard: PathBuf,
        test_shard: PathBuf,
        out_dir: PathBuf,
    ) -> Self {
        let s = &train.strong_policy;
        Self {
            tau: train.tau,
            lambda: train.lambda,
            gamma: train.gamma,
            lr: train.lr,
            head_lr_mult: train.head_lr_mult,
            momentum: train.momentum,
            batch_clean: train.batch_clean,
            batch_degraded: train.batch_degraded,
            epochs: train.epochs,
            crop: train.crop,
            seed: train.seed,
            freeze_encoder: train.freeze_encoder,
            mode: train.mode,
            deterministic: train.deterministic,
            keep_prob: train.keep_prob,
            ld_normalize: train.ld_normalize,
            burnin_steps: train.burnin_steps,
            strong_p_jitter: s.p_jitter,
            strong_brightness: s.brightness,
            strong_contrast: s.contrast,
            strong_p_gray: s.p_gray,
            strong_p_blur: s.p_blur,
            strong_blur_sigma: s.blur_sigma,
            strong_cutmix: s.cutmix,
            strong_p_cutmix: s.p_cutmix,
            tta_flips: tta.flips,
            tta_scales: tta.scales.clone(),
            train_shard,
            val_shard,
            test_shard,
            out_dir,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            tau: self.tau,
            lambda: self.lambda,
            gamma: self.gamma,
            lr: self.lr,
            head_lr_mult: self.head_lr_mult,
            momentum: self.momentum,
            batch_clean: self.batch_clean,
            batch_degraded: self.batch_degraded,
            epochs: self.epochs,
            crop: self.crop,
            seed: self.seed,
            freeze_encoder: self.freeze_encoder,
            strong_policy: StrongPolicy {
                p_jitter: self.strong_p_jitter,
                brightness: self.strong_brightness,
                contrast: self.strong_contrast,
                p_gray: self.strong_p_gray,
                p_blur: self.strong_p_blur,
                blur_sigma: self.strong_blur_sigma,
                cutmix: self.strong_cutmix,
                p_cutmix: self.strong_p_cutmix,
            },
            mode: self.mode,
            deterministic: self.deterministic,
            keep_prob: self.keep_prob,
            ld_normalize: self.ld_normalize,
            burnin_steps: self.burnin_steps,
        }
    }

    pub fn tta_policy(&self) -> TtaPolicy {
        TtaPolicy {
            flips: self.tta_flips,
            scales: self.tta_scales.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates; returns the config together with its warnings.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let warnings = cfg.validate()?;
        Ok((cfg, warnings))
    }

    pub fn validate(&self) -> Result<Vec<String>> {
        let warnings = self.train_config().validate()?;
        self.tta_policy().validate()?;
        Ok(warnings)
    }

    /// Single-line JSON of every resolved field.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
