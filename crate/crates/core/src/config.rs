//! Experiment configuration: nested JSON sections, dotted-path overrides and
//! resolved-config snapshots.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::classifier::ClassifierConfig;
use crate::dataio::{PhantomConfig, PreprocessConfig};
use crate::error::{bail, Error, Result};
use crate::metrics::MetricsConfig;
use crate::promptgen::ThresholdConfig;
use crate::segnet::SegnetConfig;
use crate::trainer::{InferenceConfig, TrainConfig, TrainMode};

pub const CONFIG_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "resolved_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_volumes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_volumes: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub modes: Vec<TrainMode>,
    pub n_labeled: Vec<usize>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            modes: vec![TrainMode::SamPpTwoStage, TrainMode::SamMixE2e],
            n_labeled: vec![0, 5, 50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub version: u32,
    pub data: DataConfig,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub classifier: ClassifierConfig,
    pub segnet: SegnetConfig,
    pub promptgen: ThresholdConfig,
    pub trainer: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub matrix: MatrixConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            data: DataConfig::default(),
            phantom: PhantomConfig::default(),
            preprocess: PreprocessConfig::default(),
            classifier: ClassifierConfig::default(),
            segnet: SegnetConfig::default(),
            promptgen: ThresholdConfig::default(),
            trainer: TrainConfig::default(),
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
            matrix: MatrixConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reduced model and image size that trains on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut c = Self::default();
        c.preprocess.image_size = 64;
        c.classifier.image_size = 64;
        c.classifier.channels = vec![8, 16, 32];
        c.segnet.image_size = 64;
        c.segnet.patch_size = 4;
        c.segnet.depth = 2;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::UnknownVersion {
                found: self.version,
                supported: CONFIG_VERSION,
            });
        }
        self.classifier.validate()?;
        self.segnet.validate()?;
        self.promptgen.validate()?;
        self.trainer.validate()?;
        let s = self.preprocess.image_size;
        if self.classifier.image_size != s || self.segnet.image_size != s {
            bail!(
                Config,
                "image sizes disagree: preprocess {s}, classifier {}, segnet {}",
                self.classifier.image_size,
                self.segnet.image_size
            );
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Merge `patch` into `base`. Every object key in `patch` must already exist
/// in `base`; non-object values replace wholesale.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let Some(slot) = b.get_mut(&k) else {
                    bail!(Config, "unknown config key {sub}");
                };
                merge(slot, v, &sub)?;
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Apply one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let Some((key, raw)) = assignment.split_once('=') else {
        bail!(Config, "override {assignment:?} is not of the form key=value");
    };
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in key.split('.') {
        let Some(next) = node.as_object_mut().and_then(|o| o.get_mut(part)) else {
            bail!(Config, "unknown config key {key}");
        };
        node = next;
    }
    *node = value;
    Ok(())
}

/// Defaults (or the desk preset), then the file, then overrides.
pub fn resolve(base: ExperimentConfig, file: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut value = serde_json::to_value(&base)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        merge(&mut value, patch, "")?;
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_snapshot(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SNAPSHOT_FILE);
    std::fs::write(&path, cfg.to_pretty_json()?).map_err(|e| Error::io(path, e))
}
