//! TOML configuration: a `[model]` table (architecture) and a `[train]`
//! table (optimization). Keys given in the file override the desk-scale
//! model preset and the training defaults; CLI flags override the file.

use anyhow::{Context, Result};
use flowtrack_core::train::TrainConfig;
use flowtrack_core::types::ModelConfig;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
        }
    }
}

/// Shallow-merge `over` onto `base`: any key present in the file replaces
/// the preset value wholesale.
fn merge(base: &mut toml::Value, over: &toml::Value) {
    if let (Some(base_table), Some(over_table)) = (base.as_table_mut(), over.as_table()) {
        for (k, v) in over_table {
            base_table.insert(k.clone(), v.clone());
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let raw: toml::Value = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;

        let model: ModelConfig = match raw.get("model") {
            None => ModelConfig::toy(),
            Some(over) => {
                let mut base = toml::Value::try_from(ModelConfig::toy())?;
                merge(&mut base, over);
                base.try_into().context("invalid [model] table")?
            }
        };
        let train: TrainConfig = match raw.get("train") {
            None => TrainConfig::default(),
            Some(over) => {
                let mut base = toml::Value::try_from(TrainConfig::default())?;
                merge(&mut base, over);
                base.try_into().context("invalid [train] table")?
            }
        };
        model.validate()?;
        train.validate()?;
        Ok(AppConfig { model, train })
    }
}
