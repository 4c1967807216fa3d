//! Run configuration: a TOML file with `[data]`, `[model]` and `[training]`
//! sections, plus dotted `section.key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetKind, LoadOptions, SeriesTable, SplitSpec, Standardizer, WindowedData};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::training::TrainConfig;

/// Environment variable naming the directory that relative dataset paths
/// resolve against.
pub const DATA_DIR_ENV: &str = "SENTINEL_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file; relative paths fall back to `$SENTINEL_DATA_DIR`.
    pub path: Option<String>,
    /// Generated series instead of a file.
    pub synthetic: Option<SyntheticSpec>,
    /// Noise seed for `synthetic`.
    pub seed: u64,
    /// Border family: etth, ettm, weather, electricity, traffic or custom.
    pub kind: String,
    /// Fractions for `kind = "custom"`.
    pub train_frac: f64,
    pub val_frac: f64,
    pub timestamp_column: Option<String>,
    pub impute_forward: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: None,
            seed: 0,
            kind: "custom".into(),
            train_frac: 0.7,
            val_frac: 0.1,
            timestamp_column: None,
            impute_forward: false,
        }
    }
}

/// A loaded, standardised dataset ready for windowing.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub table: SeriesTable,
    pub spec: SplitSpec,
    pub stats: Standardizer,
}

impl PreparedData {
    pub fn windows(&self, lookback: usize, horizon: usize) -> WindowedData {
        WindowedData::new(&self.table, self.spec, lookback, horizon)
    }
}

impl DataConfig {
    pub fn dataset_kind(&self) -> Result<DatasetKind> {
        match DatasetKind::parse(&self.kind)? {
            DatasetKind::Custom { .. } => Ok(DatasetKind::Custom {
                train: self.train_frac,
                val: self.val_frac,
            }),
            k => Ok(k),
        }
    }

    /// Resolves `data.path`: as given if it exists, otherwise under
    /// `$SENTINEL_DATA_DIR`.
    pub fn resolve_path(&self) -> Result<PathBuf> {
        let raw = self
            .path
            .as_deref()
            .ok_or_else(|| Error::Config("data.path is not set (and no data.synthetic source given)".into()))?;
        let direct = PathBuf::from(raw);
        if direct.exists() {
            return Ok(direct);
        }
        if direct.is_relative() {
            if let Ok(root) = std::env::var(DATA_DIR_ENV) {
                let joined = Path::new(&root).join(raw);
                if joined.exists() {
                    return Ok(joined);
                }
            }
        }
        Err(Error::Config(format!(
            "data.path '{raw}' does not exist (also tried under ${DATA_DIR_ENV})"
        )))
    }

    pub fn load_table(&self) -> Result<SeriesTable> {
        if let Some(s) = &self.synthetic {
            if self.path.is_some() {
                return Err(Error::Config("set either data.path or data.synthetic, not both".into()));
            }
            return s.generate(self.seed);
        }
        let opts = LoadOptions {
            timestamp_column: self.timestamp_column.clone(),
            impute_forward: self.impute_forward,
        };
        data::load_csv(&self.resolve_path()?, &opts)
    }

    pub fn prepare(&self) -> Result<PreparedData> {
        let raw = self.load_table()?;
        prepare_table(&raw, self.dataset_kind()?)
    }
}

/// Splits and standardises a raw table with train-split statistics.
pub fn prepare_table(raw: &SeriesTable, kind: DatasetKind) -> Result<PreparedData> {
    let spec = data::standard_splits(raw.rows(), kind)?;
    let (table, stats) = data::standardize(raw, &spec)?;
    Ok(PreparedData { table, spec, stats })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.training.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// (`3`, `0.5`, `true`, `[1, 2]`, `"x"`) and falls back to a bare string.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key '{key}' has an empty segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let mut cur = root;
    for seg in &path[..path.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override '{key}': '{seg}' is not a section")))?;
        cur = table
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override '{key}' does not address a table")))?;
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
