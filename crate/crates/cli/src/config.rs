//! Run configuration: one JSON file merged with `--key=value` overrides,
//! validated as a whole before any command does work.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thermoformer_core::evaluation::BaselineKind;
use thermoformer_core::{DatasetSpec, ModelConfig, SplitSpec, TrainConfig};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Training-set sizes, each a superset of the previous one.
    pub counts: Vec<usize>,
    /// Climate whose buildings form the candidate pool; defaults to the
    /// first climate in the dataset.
    pub climate: Option<String>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            counts: vec![1, 2, 4, 8],
            climate: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Every component seed equals it and per-component streams
    /// are derived from it by name.
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    /// Climates whose records are used for training; empty means all.
    pub train_climates: Vec<String>,
    pub baselines: Vec<BaselineKind>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            dataset: DatasetSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            train_climates: Vec::new(),
            baselines: Vec::new(),
            sweep: SweepConfig::default(),
        }
    }
}

/// A merged configuration together with the raw document it came from.
#[derive(Debug)]
pub struct Resolved {
    pub config: RunConfig,
    raw: Value,
}

impl Resolved {
    /// True when the config file or an override set `key` at the top level.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.raw.get(key).is_some()
    }
}

const SEEDED: [&str; 3] = ["dataset", "train", "split"];

/// Reads `path` (if any), applies `overrides` in order and validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Resolved, CliError> {
    let mut raw = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !raw.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for (key, value) in overrides {
        apply_override(&mut raw, key, value)?;
    }
    let mut config: RunConfig = serde_json::from_value(raw.clone())
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;

    for section in SEEDED {
        if let Some(seed) = raw.get(section).and_then(|s| s.get("seed")) {
            if seed.as_u64() != Some(config.seed) {
                return Err(CliError::Usage(format!(
                    "{section}.seed must match the root seed; set `seed` instead"
                )));
            }
        }
    }
    config.dataset.seed = config.seed;
    config.train.seed = config.seed;
    config.split.seed = config.seed;

    config.dataset.validate()?;
    config.model.validate()?;
    config.train.validate()?;
    config.split.validate()?;
    if config.sweep.counts.is_empty() {
        return Err(CliError::Usage("sweep.counts must not be empty".into()));
    }
    Ok(Resolved { config, raw })
}

/// Sets a dotted key. The value is read as JSON when it parses, otherwise
/// as a plain string.
fn apply_override(root: &mut Value, key: &str, value: &str) -> Result<(), CliError> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("malformed override key '{key}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let map = node.as_object_mut().ok_or_else(|| {
            CliError::Usage(format!("override '{key}' descends into a non-object"))
        })?;
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    let map = node
        .as_object_mut()
        .ok_or_else(|| CliError::Usage(format!("override '{key}' descends into a non-object")))?;
    map.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Pretty JSON of the fully resolved configuration.
pub fn snapshot(config: &RunConfig) -> String {
    let mut s = serde_json::to_string_pretty(config).expect("config serializes");
    s.push('\n');
    s
}
