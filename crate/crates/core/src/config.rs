//! Pipeline configuration, loaded from TOML.
//!
//! Every section and key is optional; missing values take their defaults and
//! unknown keys are rejected. A complete file with all defaults is produced by
//! [`PipelineConfig::to_toml`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::GraphConfig;
use crate::losses::LossWeights;
use crate::optim::AdamConfig;
use crate::splat::{SiadMode, SplatConfig};
use crate::synth::{FlowNoise, SceneConfig};
use crate::tracking::SolverConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Optimizer steps run after each new keyframe.
    pub steps_per_keyframe: usize,
    pub siad: SiadMode,
    pub background: [f64; 3],
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            steps_per_keyframe: 30,
            siad: SiadMode::Full,
            background: [0.0; 3],
        }
    }
}

/// Held-out frames: never offered to the pipeline, rendered for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub holdout: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { holdout: vec![2, 6, 10, 14] }
    }
}

/// Synthetic input used when no input directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub scene: SceneConfig,
    pub flow: FlowNoise,
    /// Fraction of pixels whose disparity prior is corrupted.
    pub corruption_rate: f64,
    /// Multiplier applied to corrupted disparities.
    pub corruption_factor: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            flow: FlowNoise::default(),
            corruption_rate: 0.0,
            corruption_factor: 3.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub frontend: GraphConfig,
    pub solver: SolverConfig,
    pub splat: SplatConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub mapping: MappingConfig,
    pub eval: EvalConfig,
    pub synthetic: SyntheticConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.solver.validate()?;
        self.splat.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        self.synthetic.scene.validate()?;
        if self.mapping.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("background color must lie in [0, 1]".into()));
        }
        let s = &self.synthetic;
        if !(0.0..=1.0).contains(&s.corruption_rate) || !(0.0..=1.0).contains(&s.flow.outlier_fraction) {
            return Err(Error::Config("corruption rate and outlier fraction must lie in [0, 1]".into()));
        }
        if !(s.corruption_factor > 0.0) || !(s.flow.sigma >= 0.0) {
            return Err(Error::Config("corruption factor must be positive and flow sigma non-negative".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(1);
            Error::parse(path, line, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}
