//! Run configuration: one JSON document holding every tunable.
//!
//! Absent keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::DEFAULT_TIMEOUT;
use crate::blend::BlendConfig;
use crate::consensus::ConsensusConfig;
use crate::error::{Error, Result};
use crate::features::{DescriptorConfig, DEFAULT_PCA_DIM};
use crate::pipeline::Phase2Config;
use crate::pool::Phase1Config;
use crate::segmenter::FloodFillConfig;
use crate::superpixel::SlicConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub pools: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// External feature file used instead of the builtin descriptor.
    pub features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub slic: SlicConfig,
    pub consensus: ConsensusConfig,
    pub descriptor: DescriptorConfig,
    pub pca_dim: usize,
    pub floodfill: FloodFillConfig,
    pub blend: BlendConfig,
    pub phase2: Phase2Config,
    /// Command line of an external segmentation/inpainting backend.
    pub backend: Option<String>,
    pub backend_timeout_secs: f64,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            slic: SlicConfig::default(),
            consensus: ConsensusConfig::default(),
            descriptor: DescriptorConfig::default(),
            pca_dim: DEFAULT_PCA_DIM,
            floodfill: FloodFillConfig::default(),
            blend: BlendConfig::default(),
            phase2: Phase2Config::default(),
            backend: None,
            backend_timeout_secs: DEFAULT_TIMEOUT.as_secs_f64(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::format("run config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }

    /// Pretty JSON with every field present, in declaration order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.slic.validate()?;
        self.consensus.validate()?;
        self.descriptor.validate()?;
        self.blend.validate()?;
        self.phase2.validate()?;
        if self.pca_dim == 0 {
            return Err(Error::invalid("pca_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.floodfill.max_frac) || self.floodfill.max_frac == 0.0 {
            return Err(Error::invalid("floodfill.max_frac must lie in (0, 1]"));
        }
        if !(self.backend_timeout_secs > 0.0 && self.backend_timeout_secs.is_finite()) {
            return Err(Error::invalid("backend_timeout_secs must be positive"));
        }
        Ok(())
    }

    pub fn phase1(&self) -> Phase1Config {
        Phase1Config {
            slic: self.slic.clone(),
            consensus: self.consensus.clone(),
            descriptor: self.descriptor.clone(),
            pca_dim: self.pca_dim,
        }
    }
}
