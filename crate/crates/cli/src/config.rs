//! Run configuration: one JSON object with flat dotted keys (`model.d_model`,
//! `train.steps`, …). Nested objects are accepted and flattened the same way.
//! Resolution order is defaults, then the file, then command-line overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cable_core::data::{load_corpus, synthetic_text, Corpus, Vocab};
use cable_core::evalx::BenchMode;
use cable_core::model::ModelConfig;
use cable_core::posenc::{CableVariant, Selector};
use cable_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// UTF-8 text file; the built-in synthetic corpus is used when unset.
    pub corpus: Option<PathBuf>,
    pub eval_fraction: f64,
    pub synthetic_chars: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { corpus: None, eval_fraction: 0.1, synthetic_chars: 400_000, synthetic_seed: 7 }
    }
}

impl DataConfig {
    fn text(&self) -> Result<String, CliError> {
        match &self.corpus {
            Some(path) => fs::read_to_string(path)
                .map_err(|e| cable_core::Error::Ingest(format!("{}: {e}", path.display())).into()),
            None => Ok(synthetic_text(self.synthetic_chars, self.synthetic_seed)),
        }
    }

    pub fn corpus(&self) -> Result<Corpus, CliError> {
        match &self.corpus {
            Some(path) => Ok(load_corpus(path, self.eval_fraction)?),
            None => Ok(Corpus::from_text(&self.text()?, self.eval_fraction)?),
        }
    }

    /// Re-tokenizes with the vocabulary a checkpoint was trained on.
    pub fn corpus_with(&self, vocab: Vocab) -> Result<Corpus, CliError> {
        Ok(Corpus::with_vocab(&self.text()?, vocab, self.eval_fraction)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Empty means doublings of the training length up to 16×.
    pub lengths: Vec<usize>,
    /// Column name in comparison tables; defaults to the encoding tag.
    pub model_tag: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub modes: Vec<BenchMode>,
    pub seq_len: usize,
    pub batch_size: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: vec![BenchMode::TrainBatched, BenchMode::InferUnbatched],
            seq_len: 128,
            batch_size: 4,
            repetitions: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditConfig {
    /// Predicted positions; the audit feeds `seq_len + 1` tokens.
    pub seq_len: usize,
    pub threshold: f64,
    /// Entries sampled per tensor; all entries when unset.
    pub max_entries: Option<usize>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { seq_len: 8, threshold: 1e-3, max_entries: Some(32) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub audit: AuditConfig,
    /// Parent of the per-run directories.
    pub out_dir: PathBuf,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            audit: AuditConfig::default(),
            out_dir: PathBuf::from("runs"),
            log_every: 100,
        }
    }
}

/// Command-line overrides, applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub set: Vec<String>,
    pub posenc: Option<String>,
    pub cable_variant: Option<String>,
    pub out_dir: Option<PathBuf>,
}

pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("keys are validated against the defaults");
            }
        }
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    pub fn from_flat(flat: &BTreeMap<String, Value>) -> Result<Self, CliError> {
        serde_json::from_value(unflatten(flat)).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn resolve(file: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut flat = RunConfig::default().flat();
        let mut put = |key: &str, v: Value, origin: &str| -> Result<(), CliError> {
            match flat.get_mut(key) {
                Some(slot) => {
                    *slot = v;
                    Ok(())
                }
                None => Err(CliError::Config(format!("unknown config key `{key}` ({origin})"))),
            }
        };
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            if !value.is_object() {
                return Err(CliError::Config("config file must hold a JSON object".into()));
            }
            for (k, v) in flatten(&value) {
                put(&k, v, "config file")?;
            }
        }
        if let Some(dir) = &ov.out_dir {
            put("out_dir", Value::String(dir.display().to_string()), "--out-dir")?;
        }
        for item in &ov.set {
            let (k, raw) =
                item.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{item}`")))?;
            // bare words that are not JSON are taken as strings
            let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            put(k.trim(), v, "--set")?;
        }
        let mut cfg = Self::from_flat(&flat)?;
        if let Some(p) = &ov.posenc {
            let sel: Selector = p.parse()?;
            cfg.model = cfg.model.with_selector(sel);
        }
        if let Some(v) = &ov.cable_variant {
            cfg.model.cable_variant = v.parse::<CableVariant>()?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Flat, key-sorted JSON as written next to run outputs.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.flat()).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        cable_core::evalx::config_hash(&self.flat()).expect("config serializes")
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.hash()[..12])
    }

    pub fn model_tag(&self) -> String {
        self.eval.model_tag.clone().unwrap_or_else(|| self.model.selector().tag())
    }
}
