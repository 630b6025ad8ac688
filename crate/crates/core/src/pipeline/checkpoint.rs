//! JSON checkpoints of the regressor state taken at stage boundaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelState, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    /// Last stage whose updates are contained in `state`.
    pub stage_completed: usize,
    pub config: TrainConfig,
    pub state: ModelState,
}

impl Checkpoint {
    pub const FORMAT: &'static str = "weakpose-checkpoint";
    pub const VERSION: u32 = 1;

    pub fn new(config: &TrainConfig, stage_completed: usize, state: &ModelState) -> Self {
        Checkpoint {
            format: Self::FORMAT.into(),
            version: Self::VERSION,
            config_hash: config.config_hash(),
            stage_completed,
            config: config.clone(),
            state: state.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    /// Parse and check internal consistency (format, embedded hash, finite weights).
    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::data(e.line(), format!("malformed checkpoint: {e}")))?;
        if ck.format != Self::FORMAT || ck.version != Self::VERSION {
            return Err(Error::data(
                1,
                format!(
                    "unsupported checkpoint format '{}' version {}",
                    ck.format, ck.version
                ),
            ));
        }
        if ck.config.config_hash() != ck.config_hash {
            return Err(Error::data(
                1,
                "checkpoint config hash does not match its embedded config",
            ));
        }
        if !(1..=3).contains(&ck.stage_completed) {
            return Err(Error::data(
                1,
                format!("stage_completed must be 1..=3, got {}", ck.stage_completed),
            ));
        }
        if !ck.state.is_finite() {
            return Err(Error::data(1, "checkpoint contains non-finite parameters"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| e.with_path(path))
    }

    /// Refuse a checkpoint taken under a different configuration.
    pub fn verify(&self, config_hash: &str, model: &ModelConfig) -> Result<()> {
        if self.config_hash != config_hash {
            return Err(Error::Config(format!(
                "checkpoint config hash {} does not match the current config {}",
                &self.config_hash[..12.min(self.config_hash.len())],
                &config_hash[..12.min(config_hash.len())]
            )));
        }
        self.state.check_shapes(model)
    }
}
