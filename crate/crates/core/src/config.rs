//! Layered run configuration: defaults, then a JSON file, then `key=value`
//! overrides. Every artifact records the digest of the effective config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::generation::DEFAULT_STEPS;
use crate::local_encoder::DistillConfig;
use crate::params::hex;
use crate::pipeline::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Triplets per relation in the packaged synthetic set.
    pub per_relation: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { per_relation: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: DEFAULT_STEPS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Cases used when a run scores itself on RelationBench.
    pub cases: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { cases: 8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalOptions,
    pub bench: BenchConfig,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as JSON when possible and as a
/// string otherwise.
pub fn parse_override(spec: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override {spec:?} lacks '='")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad key in override {spec:?}")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Value {
    path.iter().rev().fold(value, |acc, k| {
        let mut m = serde_json::Map::new();
        m.insert(k.clone(), acc);
        Value::Object(m)
    })
}

impl RunConfig {
    /// Defaults ← `file` ← `overrides`. Unknown keys anywhere are rejected.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
            if !layer.is_object() {
                return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
            }
            // A saved run record replays its embedded config.
            let layer = match layer {
                Value::Object(mut m) if m.contains_key("resolved_hash") && m.contains_key("config") => {
                    m.remove("config").expect("checked")
                }
                other => other,
            };
            merge(&mut v, layer);
        }
        for spec in overrides {
            let (path, value) = parse_override(spec)?;
            merge(&mut v, nest(&path, value));
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.sampler.num_steps == 0 {
            return Err(Error::Config("sampler.num_steps must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn resolved_hash(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        hex(&Sha256::digest(serde_json::to_vec(&v).expect("json")))
    }

    /// The config plus its hash, as stored next to artifacts.
    pub fn to_record(&self) -> Value {
        serde_json::json!({ "resolved_hash": self.resolved_hash(), "config": self })
    }

    pub fn save_record(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(&self.to_record()).expect("json");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads a record written by [`RunConfig::save_record`], checking the
    /// stored hash.
    pub fn load_record(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let cfg: Self = serde_json::from_value(v["config"].clone()).map_err(|e| Error::Config(e.to_string()))?;
        if v["resolved_hash"].as_str() != Some(cfg.resolved_hash().as_str()) {
            return Err(Error::Config(format!("{}: stored hash does not match the config", path.display())));
        }
        Ok(cfg)
    }
}
