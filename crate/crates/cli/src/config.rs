//! Run configuration: one TOML file, overridable by flags.
//!
//! Every key has a default, so an empty file (or no file) is valid. Unknown
//! keys are rejected. `0` means "all" for `train.subsample`,
//! `train.val_limit` and `eval.limit`.

use std::path::Path;

use corrnet::data::{SplitCounts, SynthConfig};
use corrnet::eval::Method;
use corrnet::netcore::Architecture;
use corrnet::robust::RobustConfig;
use corrnet::training::{AdamState, LossConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Base seed shared by every command.
    pub seed: u64,
    pub synth: SynthSection,
    pub split: SplitSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub robust: RobustSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n_correspondences: usize,
    pub outlier_fraction: f64,
    pub pixel_noise_sigma: f64,
    pub fov_degrees: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub depth_near: f64,
    pub depth_far: f64,
    pub rotation_max_degrees: f64,
    pub translation_max: f64,
    pub redraw_outliers: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// ours, classification, essential or direct.
    pub variant: String,
    pub alpha: f64,
    pub beta: f64,
    pub beta_activation_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub subsample: usize,
    pub lr: f64,
    pub width: usize,
    pub blocks: usize,
    pub val_every: u64,
    pub log_every: u64,
    pub val_limit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSection {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub methods: Vec<String>,
    /// Weights above this survive into post-processing RANSAC.
    pub keep_threshold: f64,
    pub repetitions: usize,
    pub warmup: usize,
    pub limit: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthSection::default(),
            split: SplitSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            robust: RobustSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            n_correspondences: s.n_correspondences,
            outlier_fraction: s.outlier_fraction,
            pixel_noise_sigma: s.pixel_noise_sigma,
            fov_degrees: s.fov_degrees,
            image_width: s.image_width,
            image_height: s.image_height,
            depth_near: s.depth_near,
            depth_far: s.depth_far,
            rotation_max_degrees: s.rotation_max_degrees,
            translation_max: s.translation_max,
            redraw_outliers: s.redraw_outliers,
        }
    }
}

impl Default for SplitSection {
    fn default() -> Self {
        let c = SplitCounts::from_total(3000);
        Self { train: c.train, val: c.val, test: c.test }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            variant: l.variant.to_string(),
            alpha: l.alpha,
            beta: l.beta,
            beta_activation_step: l.beta_activation_step,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            subsample: 0,
            lr: AdamState::DEFAULT_LR,
            width: t.arch.width,
            blocks: t.arch.blocks,
            val_every: t.val_every,
            log_every: t.log_every,
            val_limit: 0,
        }
    }
}

impl Default for RobustSection {
    fn default() -> Self {
        let r = RobustConfig::default();
        Self {
            max_iterations: r.max_iterations,
            inlier_threshold: r.inlier_threshold,
            confidence: r.confidence,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            methods: vec!["ransac".into(), "mlesac".into(), "lmeds".into()],
            keep_threshold: 0.0,
            repetitions: 3,
            warmup: 2,
            limit: 0,
        }
    }
}

fn nonzero(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.synth_config().validate()?;
        self.train_config()?.validate()?;
        self.robust_config().validate()?;
        self.methods()?;
        if self.eval.repetitions == 0 {
            return Err(CliError::config("eval.repetitions must be >= 1"));
        }
        if !(self.eval.keep_threshold >= 0.0 && self.eval.keep_threshold < 1.0) {
            return Err(CliError::config("eval.keep_threshold must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_correspondences: s.n_correspondences,
            outlier_fraction: s.outlier_fraction,
            pixel_noise_sigma: s.pixel_noise_sigma,
            fov_degrees: s.fov_degrees,
            image_width: s.image_width,
            image_height: s.image_height,
            depth_near: s.depth_near,
            depth_far: s.depth_far,
            rotation_max_degrees: s.rotation_max_degrees,
            translation_max: s.translation_max,
            redraw_outliers: s.redraw_outliers,
            seed: self.seed,
        }
    }

    pub fn split_counts(&self) -> SplitCounts {
        SplitCounts { train: self.split.train, val: self.split.val, test: self.split.test }
    }

    pub fn variant(&self) -> Result<Variant> {
        self.loss.variant.parse().map_err(CliError::config)
    }

    pub fn loss_config(&self) -> Result<LossConfig> {
        Ok(LossConfig {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            beta_activation_step: self.loss.beta_activation_step,
            variant: self.variant()?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            subsample: nonzero(t.subsample),
            lr: t.lr,
            loss: self.loss_config()?,
            arch: Architecture { width: t.width, blocks: t.blocks },
            seed: self.seed,
            val_every: t.val_every,
            log_every: t.log_every,
            val_limit: nonzero(t.val_limit),
        })
    }

    pub fn robust_config(&self) -> RobustConfig {
        RobustConfig {
            max_iterations: self.robust.max_iterations,
            inlier_threshold: self.robust.inlier_threshold,
            confidence: self.robust.confidence,
            seed: self.seed,
            ..RobustConfig::default()
        }
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        if self.eval.methods.is_empty() {
            return Err(CliError::config("eval.methods must not be empty"));
        }
        self.eval
            .methods
            .iter()
            .map(|m| m.parse().map_err(CliError::config))
            .collect()
    }

    /// Resets the loss weights to the standard ones of `variant`, keeping
    /// the activation step.
    pub fn set_variant(&mut self, variant: Variant) {
        let l = LossConfig::for_variant(variant);
        self.loss.variant = variant.to_string();
        self.loss.alpha = l.alpha;
        self.loss.beta = l.beta;
        if variant != Variant::Ours {
            self.loss.beta_activation_step = l.beta_activation_step;
        }
    }
}
