//! Merged run configuration: flags override the config file, which overrides defaults.

use std::path::Path;

use grouptron::model::ModelConfig;
use grouptron::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::{GlobalArgs, TrainArgs};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(global: &GlobalArgs) -> Result<Self, CliError> {
        let mut cfg = match &global.config {
            Some(path) => Self::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = global.seed {
            cfg.seed = seed;
        }
        if global.eth_config {
            cfg.model.scene_dim = ModelConfig::eth().scene_dim;
        }
        cfg.train.seed = cfg.seed;
        cfg.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn apply_train(&mut self, t: &TrainArgs) -> Result<(), CliError> {
        let c = &mut self.train;
        if let Some(v) = t.epochs {
            c.epochs = v;
        }
        if let Some(v) = t.batch_size {
            c.batch_size = Some(v);
        }
        if let Some(v) = t.lr0 {
            c.lr0 = v;
        }
        if let Some(v) = t.decay {
            c.decay = v;
        }
        if let Some(v) = t.clip {
            c.clip = v;
        }
        if let Some(v) = t.clip_mode {
            c.clip_mode = v.into();
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}
