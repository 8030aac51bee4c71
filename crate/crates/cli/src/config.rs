//! `key=value` run configuration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use versatile_core::train::{Loss, ModelConfig, TrainConfig};
use versatile_core::vconv::{Strategy, Variant};

/// A configuration problem; reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub const KEYS: &[&str] = &[
    "model.variant",
    "model.strategy",
    "model.s",
    "model.chat",
    "model.g",
    "model.widths",
    "model.kernel",
    "train.lr",
    "train.lambda",
    "train.epochs",
    "train.batch",
    "train.seed",
    "train.loss",
    "train.momentum",
    "train.weight_decay",
    "data.path",
    "data.limit",
    "data.test_limit",
    "out.checkpoint",
    "out.log",
    "determinism",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_path: Option<PathBuf>,
    /// Training samples to keep; 0 keeps all.
    pub data_limit: usize,
    pub test_limit: usize,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            data_path: None,
            data_limit: 0,
            test_limit: 0,
            checkpoint: PathBuf::from("checkpoint.vflt"),
            log: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError(format!("{key}: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(ConfigError(format!("{key}: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "model.variant" => self.model.variant = parse::<Variant>(key, value)?,
            "model.strategy" => self.model.strategy = parse::<Strategy>(key, value)?,
            "model.s" => self.model.s = parse(key, value)?,
            "model.chat" => self.model.chat = parse(key, value)?,
            "model.g" => self.model.g = parse(key, value)?,
            "model.kernel" => self.model.kernel = parse(key, value)?,
            "model.widths" => {
                self.model.widths = value
                    .split(',')
                    .map(|w| parse(key, w.trim()))
                    .collect::<Result<_, _>>()?
            }
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.lambda" => self.train.lambda = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch" => self.train.batch = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "train.loss" => self.train.loss = parse::<Loss>(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "data.path" => self.data_path = Some(PathBuf::from(value)),
            "data.limit" => self.data_limit = parse(key, value)?,
            "data.test_limit" => self.test_limit = parse(key, value)?,
            "out.checkpoint" => self.checkpoint = PathBuf::from(value),
            "out.log" => self.log = Some(PathBuf::from(value)),
            "determinism" => self.train.determinism = parse_bool(key, value)?,
            _ => return Err(ConfigError(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn assign(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("expected key=value, got `{assignment}`")))?;
        self.set(k.trim(), v)
    }

    /// Applies every assignment of a config file; `#` starts a comment.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line)
                .map_err(|e| ConfigError(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn data_path(&self) -> Result<&PathBuf, ConfigError> {
        self.data_path
            .as_ref()
            .ok_or_else(|| ConfigError("missing required key `data.path`".into()))
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn resolved(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let json = |v: serde_json::Value| v.as_str().map(str::to_string).unwrap_or_default();
        let values = [
            json(serde_json::to_value(m.variant).unwrap()),
            json(serde_json::to_value(m.strategy).unwrap()),
            m.s.to_string(),
            m.chat.to_string(),
            m.g.to_string(),
            m.widths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            m.kernel.to_string(),
            t.lr.to_string(),
            t.lambda.to_string(),
            t.epochs.to_string(),
            t.batch.to_string(),
            t.seed.to_string(),
            json(serde_json::to_value(t.loss).unwrap()),
            t.momentum.to_string(),
            t.weight_decay.to_string(),
            opt(&self.data_path),
            self.data_limit.to_string(),
            self.test_limit.to_string(),
            self.checkpoint.display().to_string(),
            opt(&self.log),
            t.determinism.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn resolved_json(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.resolved()
                .into_iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
                .collect(),
        )
    }
}
