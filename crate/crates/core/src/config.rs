//! Run configuration document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterConfig;
use crate::encoder::EncoderConfig;
use crate::error::{io_at, Error, Result};
use crate::lm::LMConfig;
use crate::model::ModelConfig;
use crate::moe::MoEConfig;
use crate::train::TrainConfig;

/// JSON schema of [`RunConfig`], shipped with the crate.
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset root holding `train/` and `test/`.
    pub dir: Option<String>,
    pub split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            split: "train".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub moe: MoEConfig,
    pub adapter: AdapterConfig,
    pub lm: LMConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            moe: self.moe.clone(),
            adapter: self.adapter.clone(),
            lm: self.lm.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        if self.data.split != "train" && self.data.split != "test" {
            return Err(Error::Config(format!("data.split must be train or test, got {:?}", self.data.split)));
        }
        Ok(())
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let text = std::fs::read_to_string(path).map_err(io_at(path))?;
        let cfg = Self::from_json(&text)?;
        let echo = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok((cfg, echo))
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
