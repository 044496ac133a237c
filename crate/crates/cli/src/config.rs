//! Experiment configuration read from TOML.
//!
//! Every section is optional. Command-line flags are applied on top of the
//! parsed file before anything runs, and the resolved configuration is what
//! gets hashed into each manifest.

use std::fs;
use std::path::{Path, PathBuf};

use menisc_core::evaluation::{Connectivity, EvalOptions, HausdorffMode};
use menisc_core::preprocess::{CROP_MARGIN_VOXELS, WINDOW};
use menisc_core::training::TrainConfig;
use menisc_core::unet::UNet3DConfig;
use menisc_core::vit::{FreezePolicy, PromptlessViTConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: PathsConfig::default(),
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            evaluate: EvaluateConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Root under which every stage writes its default output directory.
    pub output: PathBuf,
    /// Existing dataset to preprocess instead of generated phantoms.
    pub dataset: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { output: PathBuf::from("menisc-out"), dataset: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub count: usize,
    pub noise_level: f64,
    pub distractors: bool,
    /// Train, validation and test counts; by default 20% each go to
    /// validation and test.
    pub split: Option<[usize; 3]>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { count: 20, noise_level: 0.0002, distractors: true, split: None }
    }
}

impl PhantomConfig {
    pub fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let held = (self.count as f64 * 0.2).round() as usize;
            let held = held.min(self.count / 3);
            [self.count - 2 * held, held, held]
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub window: [f32; 2],
    pub crop_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { window: [WINDOW.0, WINDOW.1], crop_margin: CROP_MARGIN_VOXELS }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Unet3d,
    PromptlessVit,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Unet3d => "unet3d",
            Self::PromptlessVit => "promptless_vit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet3d" => Ok(Self::Unet3d),
            "promptless_vit" => Ok(Self::PromptlessVit),
            other => Err(CliError::Config(format!("unknown model kind {other:?} (unet3d, promptless_vit)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// `default` or `toy`; ignored when `unet` is given.
    pub unet_preset: String,
    pub unet: Option<UNet3DConfig>,
    /// `base` or `toy`; ignored when `vit` is given.
    pub vit_preset: String,
    pub vit: Option<PromptlessViTConfig>,
    pub freeze: FreezePolicy,
    /// Backbone weights in safetensors format, keyed like the original
    /// checkpoint.
    pub pretrained: Option<PathBuf>,
    /// Slices per forward pass when predicting with the 2D model.
    pub predict_batch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Unet3d,
            unet_preset: "default".into(),
            unet: None,
            vit_preset: "base".into(),
            vit: None,
            freeze: FreezePolicy::DecoderOnly,
            pretrained: None,
            predict_batch: 8,
        }
    }
}

impl ModelConfig {
    pub fn unet_config(&self) -> Result<UNet3DConfig> {
        let cfg = match (&self.unet, self.unet_preset.as_str()) {
            (Some(c), _) => c.clone(),
            (None, "default") => UNet3DConfig::default(),
            (None, "toy") => UNet3DConfig::toy(),
            (None, other) => return Err(CliError::Config(format!("unknown U-Net preset {other:?} (default, toy)"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn vit_config(&self) -> Result<PromptlessViTConfig> {
        let cfg = match &self.vit {
            Some(c) => c.clone(),
            None => PromptlessViTConfig::preset(&self.vit_preset)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub hausdorff: HausdorffMode,
    /// 6, 18 or 26.
    pub connectivity: u32,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self { hausdorff: HausdorffMode::Pooled, connectivity: 26 }
    }
}

impl EvaluateConfig {
    pub fn options(&self) -> Result<EvalOptions> {
        let connectivity = Connectivity::from_count(self.connectivity)
            .ok_or_else(|| CliError::Config(format!("connectivity {} is not 6, 18 or 26", self.connectivity)))?;
        Ok(EvalOptions { hausdorff: self.hausdorff, connectivity })
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks everything that can be checked without touching the disk.
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.preprocess.window;
        if !(lo < hi) {
            return Err(CliError::Config(format!("window [{lo}, {hi}] is empty")));
        }
        if self.phantom.count == 0 {
            return Err(CliError::Config("phantom count must be positive".into()));
        }
        if self.phantom.split_counts().iter().sum::<usize>() != self.phantom.count {
            return Err(CliError::Config(format!(
                "split {:?} does not add up to {} phantoms",
                self.phantom.split_counts(),
                self.phantom.count
            )));
        }
        if self.model.predict_batch == 0 {
            return Err(CliError::Config("predict_batch must be positive".into()));
        }
        self.train.validate()?;
        self.evaluate.options()?;
        match self.model.kind {
            ModelKind::Unet3d => self.model.unet_config().map(|_| ()),
            ModelKind::PromptlessVit => self.model.vit_config().map(|_| ()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved configuration in TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn out(&self, stage: &str) -> PathBuf {
        self.paths.output.join(stage)
    }
}
