//! Experiment configuration with dotted-path overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSpec {
    pub kind: DatasetKind,
    /// Training samples.
    pub count: usize,
    /// Held-out samples, generated after the training ones from the same seed.
    pub val_count: usize,
    /// Side length of generated images.
    pub size: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { kind: DatasetKind::GuidedSr, count: 2000, val_count: 200, size: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub precision: Precision,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSpec::default(),
            precision: Precision::F32,
            out_dir: "out".into(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Pretty JSON with keys in declaration order.
    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        if self.data.kind.task() != self.model.task {
            return Err(Error::Config(format!(
                "data.kind {} needs model.task {}, found {}",
                self.data.kind,
                self.data.kind.task(),
                self.model.task
            )));
        }
        if self.data.size == 0 {
            return Err(Error::Config("data.size must be positive".into()));
        }
        Ok(())
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the JSON
    /// form; values parse as JSON and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, key, value)?;
        }
        serde_json::from_value(root).map_err(|e| Error::Config(e.to_string()))
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (n, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a section", parts[..n].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let slot = obj.get_mut(*part).expect("checked above");
        if n + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    Err(Error::Config("empty override key".into()))
}
