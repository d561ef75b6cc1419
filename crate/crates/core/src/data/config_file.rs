use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::read_file;
use crate::error::{DataError, Error, Result};
use crate::trainer::TrainConfig;
use crate::vit::ModelConfig;

/// Contents of a JSON configuration file: `{"model": {...}, "train": {...}}`.
/// `train` may be partial or absent; missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Data(DataError::Invalid(format!("{} is not UTF-8", path.display()))))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }
}
