//! Run configuration: one JSON document, checked against the defaults'
//! shape, with `SIGNBENCH_` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use signbench::dataio::filter::{FilterConfig, Split};
use signbench::decoder::tokenizer::DEFAULT_VOCAB_SIZE;
use signbench::model::ModelConfig;
use signbench::training::{IslrConfig, TrainConfig};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "SIGNBENCH_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: PathBuf,
    pub islr_manifest: PathBuf,
    pub vocab: PathBuf,
    pub split: Option<Split>,
    pub filter: FilterConfig,
    /// Keep at most this many samples per task.
    pub max_samples: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: "corpus/manifest.json".into(),
            islr_manifest: "corpus/islr.json".into(),
            vocab: "corpus/vocab.txt".into(),
            split: Some(Split::Train),
            filter: FilterConfig::default(),
            max_samples: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
    pub langs: Vec<String>,
    /// Load this tokenizer instead of training one on the corpus.
    pub path: Option<PathBuf>,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            langs: ["bfi", "bsl", "ase", "asl", "en"].map(String::from).to_vec(),
            path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub model: ModelConfig,
    pub islr: IslrConfig,
    pub train: TrainConfig,
    /// ISLR checkpoint the backbones start from in pretraining.
    pub backbone_checkpoint: Option<PathBuf>,
    /// Pretraining checkpoint finetuning starts from.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            tokenizer: TokenizerConfig::default(),
            model: ModelConfig::default(),
            islr: IslrConfig::default(),
            train: TrainConfig::default(),
            backbone_checkpoint: None,
            checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Small dimensions that train on a laptop CPU.
    pub fn toy() -> Self {
        let model = ModelConfig::toy();
        RunConfig {
            islr: IslrConfig::toy(&model.backbone),
            tokenizer: TokenizerConfig {
                vocab_size: 256,
                ..TokenizerConfig::default()
            },
            train: TrainConfig {
                lr: 3e-3,
                ..TrainConfig::default()
            },
            model,
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.train.validate()?;
        let dim = self.model.backbone.conformer.dim;
        if self.islr.projector.visual[0] != dim {
            return Err(CliError::config(format!(
                "islr.projector.visual[0] = {} but the backbone width is {dim}",
                self.islr.projector.visual[0]
            )));
        }
        if self.tokenizer.langs.is_empty() {
            return Err(CliError::config("tokenizer.langs is empty"));
        }
        Ok(())
    }
}

/// Dotted paths of keys in `user` that the defaults do not have.
pub fn unknown_keys(defaults: &Value, user: &Value) -> Vec<String> {
    fn walk(d: &Map<String, Value>, u: &Map<String, Value>, prefix: &str, out: &mut Vec<String>) {
        for (k, v) in u {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match d.get(k) {
                None => out.push(path),
                Some(Value::Object(dm)) => {
                    if let Value::Object(um) = v {
                        walk(dm, um, &path, out);
                    }
                }
                Some(_) => {}
            }
        }
    }
    let mut out = Vec::new();
    if let (Value::Object(d), Value::Object(u)) = (defaults, user) {
        walk(d, u, "", &mut out);
    }
    out
}

/// `SIGNBENCH_TRAIN__LR=0.001` sets `train.lr`. Values parse as JSON and
/// fall back to plain strings.
pub fn apply_env(doc: &mut Value, vars: impl IntoIterator<Item = (String, String)>) -> CliResult<Vec<(String, String)>> {
    let mut applied = Vec::new();
    for (name, raw) in vars {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(|s| s.to_ascii_lowercase()).collect();
        if path.iter().any(String::is_empty) {
            return Err(CliError::config(format!("malformed override {name}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or_else(|_| Value::String(raw.clone()));
        let mut node = &mut *doc;
        for key in &path[..path.len() - 1] {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::config(format!("{name}: {key} is not a section")))?;
            node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Map::new()));
        }
        node.as_object_mut()
            .ok_or_else(|| CliError::config(format!("{name}: parent is not a section")))?
            .insert(path[path.len() - 1].clone(), value);
        applied.push((name, raw));
    }
    Ok(applied)
}

pub struct Loaded {
    pub config: RunConfig,
    /// Raw bytes of the config file, empty without one.
    pub source: Vec<u8>,
    pub env: Vec<(String, String)>,
}

pub fn load(path: Option<&Path>, vars: impl IntoIterator<Item = (String, String)>) -> CliResult<Loaded> {
    let (mut doc, source) = match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            let doc: Value =
                serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            if !doc.is_object() {
                return Err(CliError::config(format!("{}: expected a JSON object", p.display())));
            }
            (doc, bytes)
        }
        None => (Value::Object(Map::new()), Vec::new()),
    };
    let env = apply_env(&mut doc, vars)?;
    let defaults = serde_json::to_value(RunConfig::default())?;
    let unknown = unknown_keys(&defaults, &doc);
    if !unknown.is_empty() {
        return Err(CliError::config(format!("unknown config keys: {}", unknown.join(", "))));
    }
    let config: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::config(e.to_string()))?;
    config.validate()?;
    Ok(Loaded { config, source, env })
}

pub fn env_vars() -> Vec<(String, String)> {
    let mut v: Vec<_> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    v.sort();
    v
}
