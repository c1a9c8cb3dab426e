//! Run configuration: one TOML file whose tables mirror the module configs,
//! plus `section.key=value` overrides that win over the file.
//!
//! ```toml
//! [sim]        # SimConfig
//! [db]         # DbConfig
//! [bev]        # BevConfig
//! [encoder]    # EncoderConfig
//! [head]       # HeadConfig
//! [fusion]     # FusionConfig
//! [train]      # TrainConfig (fusion phase)
//! [assistant]  # epochs and camera use of the assistant phase
//! [eval]       # EvalConfig
//! [gradcheck]  # GradCheckConfig
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fingerprint::hash_of;
use crate::gradcheck::GradCheckConfig;
use crate::metrics::EvalConfig;
use crate::model::{BevConfig, EncoderConfig, FusionConfig, HeadConfig, NetConfig};
use crate::sampling_db::DbConfig;
use crate::simulator::SimConfig;
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssistantConfig {
    /// Epochs of the assistant phase; `None` uses `train.epochs`.
    pub epochs: Option<usize>,
    /// Train a LiDAR-camera assistant (with `fusion`) instead of LiDAR-only.
    pub camera: bool,
}

impl Default for AssistantConfig {
    fn default() -> Self {
        Self { epochs: None, camera: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub db: DbConfig,
    pub bev: BevConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub assistant: AssistantConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

/// Parses the right-hand side of an override as a TOML value; bare words
/// fall back to strings.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, path: &[&str], value: toml::Value) {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut t = table;
    for p in parents {
        let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        t = entry.as_table_mut().expect("just made a table");
    }
    t.insert(last.to_string(), value);
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Self::resolve(text, &[])
    }

    /// File text plus overrides, then validation.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, value) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            let path: Vec<&str> = key.trim().split('.').collect();
            if path.iter().any(|p| p.is_empty()) {
                return Err(ConfigError::Override(o.clone()));
            }
            set_path(&mut table, &path, parse_value(value.trim()));
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.display().to_string(), source })?,
            None => String::new(),
        };
        Self::resolve(&text, overrides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.sim.validate().map_err(|e| inv(&e))?;
        self.db.validate().map_err(|e| inv(&e))?;
        self.bev.validate().map_err(|e| inv(&e))?;
        self.train.validate().map_err(|e| inv(&e))?;
        if self.encoder.dilations.is_empty() || self.encoder.dilations.contains(&0) {
            return Err(ConfigError::Invalid("encoder.dilations must be non-empty and positive".into()));
        }
        if self.fusion.depth == 0 {
            return Err(ConfigError::Invalid("fusion.depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }

    /// LiDAR-only network (`fusion = false`) or the fusion student.
    pub fn net(&self, fusion: bool) -> NetConfig {
        NetConfig {
            bev: self.bev.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            fusion: fusion.then(|| self.fusion.clone()),
        }
    }

    pub fn assistant_net(&self) -> NetConfig {
        self.net(self.assistant.camera)
    }

    pub fn assistant_train(&self) -> TrainConfig {
        TrainConfig { epochs: self.assistant.epochs.unwrap_or(self.train.epochs), ..self.train.clone() }
    }
}
