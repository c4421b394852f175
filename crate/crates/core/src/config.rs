//! One JSON document holding every hyperparameter of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::Camera;
use crate::diffusion::{DiffusionConfig, Mask};
use crate::error::{Error, Result};
use crate::regressor::RegressorConfig;
use crate::scene::NoiseConfig;
use crate::text::{AlignConfig, RETRIEVAL_GROUP};
use crate::vqvae::VqConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenes for the regressor, pose codebook and text alignment.
    pub regressor_scenes: usize,
    /// Separate scenes for the denoiser, so its residuals look like held-out ones.
    pub diffusion_scenes: usize,
    pub eval_scenes: usize,
    pub noise: NoiseConfig,
    pub camera: Camera,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            regressor_scenes: 16_000,
            diffusion_scenes: 60_000,
            eval_scenes: 2000,
            noise: NoiseConfig::default(),
            camera: Camera::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sampling seeds averaged in the ablation.
    pub seeds: Vec<u64>,
    pub masks: Vec<Mask>,
    /// Similarity (true) or rigid (false) alignment for PA-MPJPE.
    pub pa_scale: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seeds: vec![0, 1, 2], masks: Mask::ALL.to_vec(), pa_scale: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub regressor: RegressorConfig,
    pub vqvae: VqConfig,
    pub align: AlignConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.noise.validate()?;
        self.data.camera.validate()?;
        if self.data.regressor_scenes == 0 || self.data.diffusion_scenes == 0 || self.data.eval_scenes == 0 {
            return Err(Error::Config("every corpus split needs at least one scene".into()));
        }
        if self.data.eval_scenes < RETRIEVAL_GROUP {
            return Err(Error::Config(format!("eval_scenes must be at least {RETRIEVAL_GROUP} to score retrieval")));
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval needs at least one seed".into()));
        }
        self.regressor.validate()?;
        self.vqvae.validate()?;
        self.align.validate()?;
        self.diffusion.validate()
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
