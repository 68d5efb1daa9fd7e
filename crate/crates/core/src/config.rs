//! Run configuration: model shape, synthesis parameters and the three
//! training stages.
//!
//! The on-disk format is TOML with one table per section (`[model]`,
//! `[synth]`, `[stage1]`, `[stage2]`, `[stage3]`, `[eval]`). Keys omitted from
//! a file fall back to the selected profile; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DsrError, Result};
use crate::synth::SimilarityBound;
use crate::types::Level;

/// Named default sets.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Hyperparameters reported for the full-size method.
    #[default]
    Paper,
    /// Reduced schedule for a single workstation, 128 px inputs.
    Desk,
    /// Desk schedule with the smallest network (64 px, D=32, 512 codes).
    Tiny,
}

impl FromStr for Profile {
    type Err = DsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "desk" => Ok(Self::Desk),
            "tiny" => Ok(Self::Tiny),
            other => Err(DsrError::Config(format!(
                "unknown profile `{other}` (expected paper, desk or tiny)"
            ))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Paper => "paper",
            Self::Desk => "desk",
            Self::Tiny => "tiny",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Silu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input resolution; images are resized to this on load.
    pub image_size: usize,
    /// Latent vector dimension `D`.
    pub embed_dim: usize,
    /// Vectors per codebook `N_K` (both levels).
    pub codebook_size: usize,
    /// Channel width of the encoder, both decoders and the restriction modules.
    pub base_width: usize,
    pub detector_width: usize,
    pub upsampler_width: usize,
    /// Group-norm groups; 0 disables normalization.
    pub norm_groups: usize,
    pub activation: Activation,
    /// U-Net skip connections inside the subspace restriction modules.
    pub restrict_skips: bool,
    /// Grid whose resolution the detector's mask `M` is produced at.
    pub mask_level: Level,
}

impl ModelConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let base = Self {
            image_size: 256,
            embed_dim: 128,
            codebook_size: 4096,
            base_width: 128,
            detector_width: 64,
            upsampler_width: 32,
            norm_groups: 8,
            activation: Activation::Silu,
            restrict_skips: true,
            mask_level: Level::Hi,
        };
        match profile {
            Profile::Paper => base,
            Profile::Desk => Self {
                image_size: 128,
                embed_dim: 64,
                codebook_size: 1024,
                base_width: 64,
                detector_width: 32,
                upsampler_width: 16,
                ..base
            },
            Profile::Tiny => Self {
                image_size: 64,
                embed_dim: 32,
                codebook_size: 512,
                base_width: 32,
                detector_width: 16,
                upsampler_width: 16,
                norm_groups: 4,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(DsrError::Config(m));
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return err(format!("model.image_size {} must be a positive multiple of 8", self.image_size));
        }
        if self.codebook_size < 2 {
            return err("model.codebook_size must be at least 2".into());
        }
        for (name, w) in [
            ("embed_dim", self.embed_dim),
            ("base_width", self.base_width),
            ("detector_width", self.detector_width),
            ("upsampler_width", self.upsampler_width),
        ] {
            if w < 2 || w % 2 != 0 {
                return err(format!("model.{name} must be an even number >= 2, got {w}"));
            }
            if self.norm_groups > 0 && (w / 2) % self.norm_groups != 0 {
                return err(format!(
                    "model.norm_groups {} must divide half of model.{name} ({w})",
                    self.norm_groups
                ));
            }
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

/// Parameters of the anomaly generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Noise lattice has `2^e` cells per axis, `e` drawn from this inclusive range.
    pub perlin_min_exponent: u32,
    pub perlin_max_exponent: u32,
    /// Binarization threshold on the `[0, 1]`-normalized field.
    pub threshold_min: f64,
    pub threshold_max: f64,
    /// Accepted anomalous-area fraction window.
    pub min_area: f64,
    pub max_area: f64,
    /// Resampling attempts before a mask outside the window is returned.
    pub max_tries: usize,
    pub smudge_alpha_min: f64,
    pub smudge_alpha_max: f64,
    pub smudge_min_area: f64,
    pub smudge_max_area: f64,
}

impl SynthConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let max_exp = match profile {
            Profile::Paper => 5,
            Profile::Desk => 4,
            Profile::Tiny => 3,
        };
        Self {
            perlin_min_exponent: 0,
            perlin_max_exponent: max_exp,
            threshold_min: 0.6,
            threshold_max: 0.9,
            min_area: 0.02,
            max_area: 0.35,
            max_tries: 50,
            smudge_alpha_min: 0.5,
            smudge_alpha_max: 1.0,
            smudge_min_area: 0.02,
            smudge_max_area: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64| (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi) && lo <= hi;
        if self.perlin_min_exponent > self.perlin_max_exponent {
            return Err(DsrError::Config("synth.perlin_min_exponent exceeds perlin_max_exponent".into()));
        }
        if !ordered(self.threshold_min, self.threshold_max)
            || !ordered(self.min_area, self.max_area)
            || !ordered(self.smudge_alpha_min, self.smudge_alpha_max)
            || !ordered(self.smudge_min_area, self.smudge_max_area)
        {
            return Err(DsrError::Config(
                "synth ranges must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        if self.max_tries == 0 {
            return Err(DsrError::Config("synth.max_tries must be positive".into()));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[default]
    One,
    Two,
    Three,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }
}

/// Which reconstruction terms of the second-stage objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconLoss {
    Both,
    ImageOnly,
    FeatureOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    #[serde(skip)]
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Iteration at which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Option<usize>,
    pub lr_decay_factor: f64,
    /// Commitment weight of the first-stage objective.
    pub lambda1: f64,
    /// Feature reconstruction weight of the second-stage objective.
    pub lambda2: f64,
    /// Image reconstruction weight of the second-stage objective.
    pub lambda3: f64,
    pub focal_gamma: f64,
    /// Focal weight of the anomalous class; the normal class gets `1 - alpha`.
    /// Unset means unweighted.
    pub focal_alpha: Option<f64>,
    /// Similarity bound: fraction of nearest codebook neighbours excluded.
    pub lambda_s: f64,
    /// Train on image-space pasted anomalies instead of latent injection.
    pub image_space_anomalies: bool,
    /// Replace the bounded sampler by uniform codebook draws.
    pub random_sampling: bool,
    pub loss_img_only: bool,
    pub loss_feat_only: bool,
    /// Folders (flat layout: `images/`, `masks/`) of real annotated anomalies.
    pub supervised_anomaly_dirs: Vec<PathBuf>,
    /// Fraction of each batch drawn from the real anomalies when present.
    pub supervised_ratio: f64,
    /// Random horizontal flips of training images.
    pub augment_flip: bool,
    pub log_interval: usize,
    /// Iterations between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl StageConfig {
    pub fn for_profile(profile: Profile, stage: Stage) -> Self {
        let base = Self {
            stage,
            iterations: 0,
            batch_size: 8,
            learning_rate: 2e-4,
            lr_decay_at: None,
            lr_decay_factor: 0.1,
            lambda1: crate::vq::DEFAULT_COMMITMENT_WEIGHT,
            lambda2: 1.0,
            lambda3: 10.0,
            focal_gamma: 2.0,
            focal_alpha: Some(0.75),
            lambda_s: 0.05,
            image_space_anomalies: false,
            random_sampling: false,
            loss_img_only: false,
            loss_feat_only: false,
            supervised_anomaly_dirs: Vec::new(),
            supervised_ratio: 0.5,
            augment_flip: true,
            log_interval: 50,
            checkpoint_interval: 0,
        };
        let paper = profile == Profile::Paper;
        match stage {
            Stage::One => Self {
                iterations: if paper { 200_000 } else { 5_000 },
                batch_size: if paper { 32 } else { 8 },
                ..base
            },
            Stage::Two => Self {
                iterations: if paper { 100_000 } else { 2_000 },
                lr_decay_at: Some(if paper { 80_000 } else { 1_600 }),
                ..base
            },
            Stage::Three => Self {
                iterations: if paper { 20_000 } else { 500 },
                ..base
            },
        }
    }

    pub fn recon_loss(&self) -> ReconLoss {
        match (self.loss_img_only, self.loss_feat_only) {
            (true, _) => ReconLoss::ImageOnly,
            (_, true) => ReconLoss::FeatureOnly,
            _ => ReconLoss::Both,
        }
    }

    /// Learning rate in effect at `iteration` (0-based).
    pub fn learning_rate_at(&self, iteration: usize) -> f64 {
        match self.lr_decay_at {
            Some(at) if iteration >= at => self.learning_rate * self.lr_decay_factor,
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check(false)
    }

    /// As [`validate`](Self::validate), but a zero learning rate is accepted
    /// so that a run can be made to leave its parameters untouched.
    pub(crate) fn validate_for_training(&self) -> Result<()> {
        self.check(true)
    }

    fn check(&self, zero_lr_ok: bool) -> Result<()> {
        let section = format!("stage{}", self.stage.number());
        let err = |m: String| Err(DsrError::Config(format!("{section}.{m}")));
        if self.iterations == 0 {
            return err("iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be positive".into());
        }
        let lr_ok = self.learning_rate > 0.0 || (zero_lr_ok && self.learning_rate == 0.0);
        if !(lr_ok && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.focal_gamma < 0.0 {
            return err("focal_gamma must be non-negative".into());
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return err(format!("focal_alpha must lie in [0, 1], got {a}"));
            }
        }
        if !(self.lambda_s > 0.0 && self.lambda_s < 1.0) {
            return err(format!("lambda_s must lie in (0, 1), got {}", self.lambda_s));
        }
        if self.loss_img_only && self.loss_feat_only {
            return err("loss_img_only and loss_feat_only cannot both be set".into());
        }
        if !(0.0..=1.0).contains(&self.supervised_ratio) {
            return err("supervised_ratio must lie in [0, 1]".into());
        }
        Ok(())
    }
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper, Stage::One)
    }
}

/// Pixel-level score pooling for localization AP.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    /// One AP over the union of all test pixels.
    #[default]
    Dataset,
    /// Mean of per-image APs over images that contain anomalous pixels.
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score pixels with the bilinearly upsampled `M` instead of `M_r`.
    pub no_upsampler: bool,
    pub pixel_pooling: PixelPooling,
    /// Compute pixel AP; anomalous test images then need masks.
    pub pixel_metrics: bool,
    pub overlay_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            no_upsampler: false,
            pixel_pooling: PixelPooling::Dataset,
            pixel_metrics: true,
            overlay_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DsrConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub eval: EvalConfig,
}

impl Default for DsrConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Paper)
    }
}

impl DsrConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            seed: 0,
            model: ModelConfig::for_profile(profile),
            synth: SynthConfig::for_profile(profile),
            stage1: StageConfig::for_profile(profile, Stage::One),
            stage2: StageConfig::for_profile(profile, Stage::Two),
            stage3: StageConfig::for_profile(profile, Stage::Three),
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text` on top of the `profile` defaults.
    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self> {
        // First pass rejects unknown keys and type errors with source positions.
        toml::from_str::<DsrConfig>(text).map_err(|e| located(text, &e))?;
        let overrides: toml::Table = toml::from_str(text).map_err(|e| located(text, &e))?;
        let mut merged = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| DsrError::Config(e.to_string()))?;
        merge_tables(&mut merged, overrides);
        let mut cfg: DsrConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| DsrError::Config(e.message().to_string()))?;
        cfg.fix_stage_ids();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DsrError::io(path, e))?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            DsrError::Config(m) => DsrError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub(crate) fn fix_stage_ids(&mut self) {
        self.stage1.stage = Stage::One;
        self.stage2.stage = Stage::Two;
        self.stage3.stage = Stage::Three;
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
            Stage::Three => &self.stage3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        for s in [&self.stage1, &self.stage2, &self.stage3] {
            s.validate()?;
        }
        SimilarityBound::new(self.stage2.lambda_s, self.model.codebook_size)?;
        Ok(())
    }
}

/// Paper-profile configuration read from `path`.
pub fn load_config(path: &Path) -> Result<DsrConfig> {
    DsrConfig::load(path, Profile::Paper)
}

fn merge_tables(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn located(text: &str, e: &toml::de::Error) -> DsrError {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            DsrError::Config(format!("line {line}: {}", e.message().trim()))
        }
        None => DsrError::Config(e.message().trim().to_string()),
    }
}
