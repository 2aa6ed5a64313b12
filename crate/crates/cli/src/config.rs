//! Run configuration: defaults, then a TOML file, then `--set` overrides,
//! then named flags.

use std::path::PathBuf;

use midetr::model::ModelConfig;
use midetr::synth::{SceneConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Parent of every run directory.
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Layers `file` (TOML text) and `overrides` (`dotted.key`, raw value)
    /// over the defaults, then validates.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = Table::try_from(RunConfig::default()).expect("defaults serialize");
        if let Some(text) = file {
            let user: Table = text.parse().map_err(|e| CliError::Config(format!("config file: {e}")))?;
            merge(&mut table, user);
        }
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.scene.validate()?;
        self.train.validate()?;
        if self.scene.image_size != self.model.image_size {
            return Err(CliError::Config(format!(
                "scene.image_size {} differs from model.image_size {}",
                self.scene.image_size, self.model.image_size
            )));
        }
        if self.scene.n_classes != self.model.n_classes {
            return Err(CliError::Config(format!(
                "scene.n_classes {} differs from model.n_classes {}",
                self.scene.n_classes, self.model.n_classes
            )));
        }
        if self.scene.max_objects > self.model.n_queries {
            return Err(CliError::Config(format!(
                "scene.max_objects {} exceeds model.n_queries {}",
                self.scene.max_objects, self.model.n_queries
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Hex SHA-256 prefix over the resolved config (without `out_dir`) and any
/// command arguments that shape the output.
pub fn config_hash(cfg: &RunConfig, command: &str, args: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update(b"\0");
    h.update(toml::to_string(&cfg.model).expect("serializes").as_bytes());
    h.update(toml::to_string(&cfg.scene).expect("serializes").as_bytes());
    h.update(toml::to_string(&cfg.train).expect("serializes").as_bytes());
    for a in args {
        h.update(b"\0");
        h.update(a.as_bytes());
    }
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_dotted(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Config(format!("empty key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(Value::Table(t)) => t,
            _ => return Err(CliError::Config(format!("unknown config key {key:?}"))),
        };
    }
    if !cur.contains_key(last) {
        return Err(CliError::Config(format!("unknown config key {key:?}")));
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected KEY=VALUE, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
