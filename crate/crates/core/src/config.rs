//! Run configuration: one TOML table per module plus env-var overrides.
//!
//! An override variable `HANDEYE__<SECTION>__<KEY>=<value>` replaces
//! `<section>.<key>`; `HANDEYE__SEED` replaces the top-level seed. Values
//! parse as TOML scalars or arrays, falling back to strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::{Table, Value};

use crate::control::QLearningConfig;
use crate::finetune::FinetuneConfig;
use crate::perception::PerceptionConfig;
use crate::render::{Camera, PerturbationSpec};
use crate::sim::ArmModel;

pub const ENV_PREFIX: &str = "HANDEYE__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {var}: {message}")]
    Override { var: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_sim: usize,
    pub n_pseudo_real: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_sim: 2000,
            n_pseudo_real: 1418,
        }
    }
}

/// Best-of-N selection of the control net by snapshot R̄.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub control_seeds: usize,
    pub trials: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            control_seeds: 3,
            trials: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: crate::eval::DEFAULT_TRIALS,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub arm: ArmModel,
    pub camera: Camera,
    pub perturbation: PerturbationSpec,
    pub dataset: DatasetConfig,
    pub perception: PerceptionConfig,
    pub control: QLearningConfig,
    pub selection: SelectionConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            arm: ArmModel::default(),
            camera: Camera::default(),
            perturbation: PerturbationSpec::default(),
            dataset: DatasetConfig::default(),
            perception: PerceptionConfig::default(),
            control: QLearningConfig::default(),
            selection: SelectionConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are TOML-representable")
    }

    /// Parses `path` (or the defaults when `None`) and applies `overrides`.
    pub fn load<I>(path: Option<&Path>, overrides: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Io {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                text.parse::<Table>().map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => Table::new(),
        };
        for (var, raw) in overrides {
            if let Some(key) = var.strip_prefix(ENV_PREFIX) {
                apply_override(&mut table, &var, key, &raw)?;
            }
        }
        Table::try_into(table).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Sets the master seed and derives every stage seed from it.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.perception.seed = seed;
        self.control.seed = seed;
        self.finetune.seed = seed;
        self.eval.seed = seed;
    }

    /// Control seeds tried by best-of-N selection.
    pub fn control_seeds(&self) -> Vec<u64> {
        (0..self.selection.control_seeds as u64).map(|i| self.control.seed + i).collect()
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

fn apply_override(table: &mut Table, var: &str, key: &str, raw: &str) -> Result<(), ConfigError> {
    let err = |message: String| ConfigError::Override {
        var: var.to_string(),
        message,
    };
    let path: Vec<String> = key.split("__").map(str::to_lowercase).collect();
    if path.iter().any(String::is_empty) || path.len() > 2 {
        return Err(err("expected HANDEYE__KEY or HANDEYE__SECTION__KEY".into()));
    }
    let value = parse_value(raw);
    match path.as_slice() {
        [k] => {
            table.insert(k.clone(), value);
        }
        [section, k] => {
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(t) = entry else {
                return Err(err(format!("{section} is not a section")));
            };
            t.insert(k.clone(), value);
        }
        _ => unreachable!(),
    }
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// `HANDEYE__*` variables of the current process, sorted by name.
pub fn env_overrides() -> Vec<(String, String)> {
    let mut vars: Vec<(String, String)> = std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    vars
}
