//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form, so a reload reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use wavetuner::data::Scaler;
use wavetuner::model::{ModelConfig, WaveTuner};
use wavetuner::params::ParamStore;
use wavetuner::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredArray {
    pub shape: Vec<usize>,
    /// Row-major values.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub split_ratios: [f64; 3],
    pub channel_names: Vec<String>,
    pub scaler: Scaler,
    pub params: BTreeMap<String, StoredArray>,
}

impl Checkpoint {
    pub fn new(config: &ModelConfig, params: &ParamStore, split_ratios: [f64; 3], channel_names: Vec<String>, scaler: Scaler) -> Self {
        let params = params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_string(),
                    StoredArray {
                        shape: p.shape().to_vec(),
                        values: p.value.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            split_ratios,
            channel_names,
            scaler,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Data(format!("serializing checkpoint: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint is not valid JSON: {e}")))?;
        match raw.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(Error::Data(format!(
                    "checkpoint format version {v} is not supported (expected {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Data("checkpoint has no format_version".into())),
        }
        serde_json::from_value(raw).map_err(|e| Error::Data(format!("malformed checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()? + "\n").map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Checkpoint::from_json(&text)
    }

    /// Rebuilds the model and overwrites every freshly initialized parameter
    /// with the stored values. Missing, extra or misshapen entries are errors.
    pub fn restore(&self) -> Result<(WaveTuner, ParamStore)> {
        let (model, mut params) = WaveTuner::build(self.config.clone())?;
        if params.len() != self.params.len() {
            let expected: Vec<&str> = params.names().collect();
            let extra: Vec<&String> = self.params.keys().filter(|k| !expected.contains(&k.as_str())).collect();
            return Err(Error::Data(format!(
                "checkpoint holds {} parameter arrays, model needs {} (unexpected: {extra:?})",
                self.params.len(),
                params.len()
            )));
        }
        for (name, stored) in &self.params {
            let p = params
                .get_mut(name)
                .map_err(|_| Error::Data(format!("checkpoint parameter '{name}' does not belong to the model")))?;
            if p.shape() != stored.shape.as_slice() {
                return Err(Error::Data(format!(
                    "parameter '{name}' has shape {:?} in the checkpoint, model expects {:?}",
                    stored.shape,
                    p.shape()
                )));
            }
            p.value = ArrayD::from_shape_vec(IxDyn(&stored.shape), stored.values.clone())
                .map_err(|e| Error::Data(format!("parameter '{name}': {e}")))?;
        }
        Ok((model, params))
    }
}
