//! Run configuration: flat dotted JSON keys plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimizerConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    /// One run per seed; empty means a single run with `model.seed`.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optim: OptimizerConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths::default(),
            seeds: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("config sections are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

/// Parses an override value: JSON literals first, bare strings otherwise.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Every accepted key in dotted form with its current value.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().map(|m| m.keys().cloned().collect()).unwrap_or_default()
    }

    fn resolve_key(key: &str, known: &Map<String, Value>) -> Result<String> {
        if known.contains_key(key) {
            return Ok(key.to_string());
        }
        if !key.contains('.') {
            let hits: Vec<&String> = known
                .keys()
                .filter(|k| k.rsplit('.').next() == Some(key))
                .collect();
            match hits.as_slice() {
                [one] => return Ok((*one).clone()),
                [] => {}
                many => {
                    let names: Vec<&str> = many.iter().map(|s| s.as_str()).collect();
                    return Err(Error::Config(format!("key {key:?} is ambiguous: {}", names.join(", "))));
                }
            }
        }
        Err(Error::Config(format!("unknown config key {key:?}")))
    }

    /// Applies dotted (or unambiguous bare) keys on top of `self`.
    pub fn apply(&self, entries: impl IntoIterator<Item = (String, Value)>) -> Result<RunConfig> {
        let mut flat = self.to_flat()?;
        for (key, value) in entries {
            let key = Self::resolve_key(&key, &flat)?;
            flat.insert(key, value);
        }
        serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `key=value` command-line overrides.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<RunConfig> {
        let mut entries = Vec::new();
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not of the form key=value")))?;
            entries.push((k.trim().to_string(), parse_value(v.trim())));
        }
        self.apply(entries)
    }

    /// Reads a JSON object of dotted keys over the defaults. Nested objects
    /// are accepted and flattened.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text)?;
        if !v.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        let mut flat = Map::new();
        flatten("", &v, &mut flat);
        let known = Self::default().to_flat()?;
        for key in flat.keys() {
            if !known.contains_key(key) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
        }
        Self::default().apply(flat)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Pretty, sorted, flat-key JSON; feeding it back to `from_json`
    /// yields an equal config.
    pub fn to_resolved_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&Value::Object(self.to_flat()?))? + "\n")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if self.data.train.is_none() {
            return Err(Error::Config("data.train is required".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(s) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::Config(format!("seed {s} is listed twice")));
        }
        Ok(())
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.model.seed]
        } else {
            self.seeds.clone()
        }
    }
}
