//! Versioned JSON checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::experiment::DatasetSpec;
use crate::model::ModelParams;
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "smoothloss.checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to rebuild a trained model and the data it saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub dataset: DatasetSpec,
    /// Seed the dataset splits were drawn with.
    pub data_seed: u64,
    pub standardizer: Standardizer,
    pub epochs_completed: usize,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        dataset: DatasetSpec,
        data_seed: u64,
        standardizer: Standardizer,
        epochs_completed: usize,
        params: ModelParams,
    ) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            dataset,
            data_seed,
            standardizer,
            epochs_completed,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::parse(path, format!("cannot read checkpoint: {e}")))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("not a JSON checkpoint: {e}")))?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT || version != CHECKPOINT_VERSION as u64 {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint '{format}' version {version}, expected '{CHECKPOINT_FORMAT}' version {CHECKPOINT_VERSION}"),
            ));
        }
        let ckpt: Checkpoint = serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))?;
        if ckpt.params.config != ckpt.config.model {
            return Err(Error::parse(path, "model parameters do not match the stored configuration"));
        }
        Ok(ckpt)
    }

    /// Regenerates or reloads the splits and normalizes them with the
    /// stored training statistics.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = self.dataset.load_raw(self.data_seed)?;
        if train.input_dim() != self.standardizer.mean.len() {
            return Err(Error::Config(format!(
                "dataset has {} features but the checkpoint was trained on {}",
                train.input_dim(),
                self.standardizer.mean.len()
            )));
        }
        let train = train.with_inputs(self.standardizer.apply(&train.inputs)?)?;
        let test = test.with_inputs(self.standardizer.apply(&test.inputs)?)?;
        Ok((train, test))
    }
}
