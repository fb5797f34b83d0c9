//! Trained threshold model: `theta(U) = theta_g + beta . F(U)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{compute_features_into, FeatureConfig, FeatureError, FeatureKind};
use crate::solver::Diagnostics;
use crate::volume::Environment;

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithModel {
    pub version: u32,
    pub theta_g: f64,
    /// Largest representable voxel value of the training volume.
    pub max_value: u32,
    pub features: Vec<FeatureKind>,
    pub env_size: usize,
    /// One weight per entry of `features`.
    pub beta: Vec<f64>,
    /// Regularization chosen by cross validation; absent when the targets
    /// carried no signal and the weights are zero by construction.
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub seed_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl FaithModel {
    /// Zero weights: reproduces plain global thresholding on complete windows.
    pub fn global(theta_g: f64, max_value: u32, cfg: &FeatureConfig) -> Self {
        Self {
            version: MODEL_VERSION,
            theta_g,
            max_value,
            features: cfg.features().to_vec(),
            env_size: cfg.env_size(),
            beta: vec![0.0; cfg.dim()],
            lambda: None,
            mu: None,
            seed_count: 0,
            diagnostics: None,
        }
    }

    pub fn feature_config(&self) -> Result<FeatureConfig, ModelError> {
        Ok(FeatureConfig::new(self.features.clone(), self.env_size)?)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.version != MODEL_VERSION {
            return Err(ModelError::Invalid(format!(
                "unsupported version {}",
                self.version
            )));
        }
        self.feature_config()?;
        if self.beta.len() != self.features.len() {
            return Err(ModelError::Invalid(format!(
                "{} weights for {} features",
                self.beta.len(),
                self.features.len()
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(ModelError::Invalid("non-finite weight".into()));
        }
        if !(0.0..=self.max_value as f64).contains(&self.theta_g) {
            return Err(ModelError::Invalid(format!(
                "global threshold {} outside [0, {}]",
                self.theta_g, self.max_value
            )));
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.beta.iter().all(|&b| b == 0.0)
    }

    /// `theta_g + beta . F(env)`, not clamped to `[0, W]`.
    ///
    /// `scratch` must hold one slot per feature.
    pub fn threshold_with(
        &self,
        cfg: &FeatureConfig,
        env: &Environment,
        scratch: &mut [f64],
    ) -> Result<f64, FeatureError> {
        compute_features_into(env, cfg, scratch)?;
        Ok(self.theta_g + self.beta.iter().zip(scratch.iter()).map(|(b, f)| b * f).sum::<f64>())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Local threshold of one environment under `model`.
pub fn local_threshold(model: &FaithModel, env: &Environment) -> Result<f64, ModelError> {
    let cfg = model.feature_config()?;
    let mut scratch = vec![0.0; cfg.dim()];
    Ok(model.threshold_with(&cfg, env, &mut scratch)?)
}
