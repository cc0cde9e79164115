//! Run configuration: defaults, then a TOML file, then `--set key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use strata_core::corpus::GeneratorConfig;
use strata_core::evalsuite::EvalOptions;
use strata_core::trainer::{Mode, TrainConfig};
use toml::{Table, Value};

use crate::error::CliError;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// File name of the effective config echoed into every output directory.
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReproduceSettings {
    /// Wall-clock budget for the whole comparison, in minutes.
    pub budget_minutes: f64,
    pub modes: Vec<Mode>,
}

impl Default for ReproduceSettings {
    fn default() -> Self {
        ReproduceSettings {
            budget_minutes: 30.0,
            modes: Mode::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Seed of the synthetic corpus generator.
    pub seed: u64,
    pub corpus: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub reproduce: ReproduceSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            corpus: GeneratorConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            reproduce: ReproduceSettings::default(),
        }
    }
}

impl RunConfig {
    /// Effective config from an optional file and `key=value` overrides
    /// (dotted keys, TOML values; bare words are taken as strings).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut root = Value::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| strata_core::Error::Path {
                path: path.to_path_buf(),
                source: e,
            })?;
            let file: Table = text
                .parse()
                .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {}", path.display(), e.message())))?;
            if let Some(v) = file.get("schema_version") {
                if v.as_integer() != Some(CONFIG_SCHEMA_VERSION as i64) {
                    return Err(CliError::Config(format!(
                        "{}: schema_version {v} is not supported (expected {CONFIG_SCHEMA_VERSION})",
                        path.display()
                    )));
                }
            }
            merge(&mut root, Value::Table(file));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{o}` is not of the form key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.train.validate()?;
        if !(self.reproduce.budget_minutes > 0.0) {
            return Err(CliError::Config("reproduce.budget_minutes must be positive".into()));
        }
        Ok(())
    }

    /// Use one seed for generation, training and evaluation.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| strata_core::Error::Path { path, source: e })?;
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
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

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("bad override key `{key}`")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("override `{key}` does not name a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
