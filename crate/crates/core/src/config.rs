//! Run configuration: a strict TOML schema plus dotted-key overrides.
//!
//! ```toml
//! [data]
//! train = "toy/train.jsonl"
//! val = "toy/val.jsonl"
//!
//! [model]
//! channels = 32
//!
//! [train]
//! method = "mixcycle"
//! batch_size = 8
//! ```
//!
//! Unknown keys anywhere are rejected. Overrides such as
//! `train.mixpit_warmstart_epochs=0` are applied to the parsed tree before
//! it is checked against the schema, so they obey the same rules.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::ToySpec;
use crate::error::{Error, Result};
use crate::evaluation::DEFAULT_REPETITIONS;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub sample_rate: u32,
    /// Fraction of training records used, drawn with `train.seed`.
    pub subset_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            sample_rate: crate::dsp::DEFAULT_SAMPLE_RATE,
            subset_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            repetitions: DEFAULT_REPETITIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: ToySpec,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.subset_fraction > 0.0 && self.data.subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "data.subset_fraction must be in (0, 1], got {}",
                self.data.subset_fraction
            )));
        }
        if self.data.sample_rate == 0 {
            return Err(Error::Config("data.sample_rate must be positive".into()));
        }
        if self.eval.repetitions == 0 {
            return Err(Error::Config("eval.repetitions must be positive".into()));
        }
        Ok(())
    }

    /// TOML snapshot that [`parse_config`] reads back to an equal value.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn schema_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim().to_string())
}

/// Parses a config file without overrides.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    build(parse_tree(text)?)
}

fn parse_tree(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(schema_error)
}

fn build(tree: toml::Table) -> Result<RunConfig> {
    let cfg: RunConfig = toml::Value::Table(tree).try_into().map_err(schema_error)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a TOML value, falling back to a bare string so that
/// `data.train=toy/train.jsonl` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override to a config tree.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override '{spec}' has an empty key segment")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = tree;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{spec}': '{p}' is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parses `text` (or an empty config), applies overrides in order and
/// checks the result against the schema.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut tree = parse_tree(text)?;
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    build(tree)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_with_overrides(&text, overrides)
}
