//! Run configuration: one JSON document carrying every component's settings.

use std::path::{Path, PathBuf};

use curvseg::embednet::{LossConfig, OptimConfig, TrainConfig};
use curvseg::imagecore::AugmentParams;
use curvseg::io::read_file;
use curvseg::pipeline::PipelineConfig;
use curvseg::synthgen::SceneSpec;
use curvseg::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub scene: SceneSpec,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub augment: AugmentParams,
    pub pipeline: PipelineConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scene: SceneSpec::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            augment: AugmentParams::default(),
            pipeline: PipelineConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let config_err = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        self.scene.validate().map_err(config_err)?;
        self.loss.validate().map_err(config_err)?;
        self.optim.validate().map_err(config_err)?;
        self.augment.validate().map_err(config_err)?;
        self.pipeline.validate().map_err(config_err)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            optim: self.optim,
            augment: self.augment,
            seed: self.seed,
        }
    }
}
