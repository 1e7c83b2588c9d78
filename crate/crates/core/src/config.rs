//! One-file TOML experiment configuration.
//!
//! Sections `[data]`, `[transforms]`, `[model]`, `[objective]`, `[optim]`
//! and `[eval]`. Every key is optional and falls back to its default;
//! unknown keys and ill-typed values are rejected with the dotted key in
//! the error.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bagstore::SyntheticSpec;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::objectives::ObjectiveConfig;
use crate::trainer::{OptimConfig, TrainConfig};
use crate::transforms::TransformConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: SyntheticSpec,
    pub transforms: TransformConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub eval: EvalConfig,
}

fn section<T: DeserializeOwned + Default>(name: &str, value: Option<&toml::Value>) -> Result<T> {
    let Some(value) = value else {
        return Ok(T::default());
    };
    let table = value
        .as_table()
        .ok_or_else(|| Error::config(name, "expected a table"))?;
    // Deserialize one key at a time so a type error can name its key.
    for (k, v) in table {
        let mut single = toml::Table::new();
        single.insert(k.clone(), v.clone());
        if let Err(e) = T::deserialize(toml::Value::Table(single)) {
            return Err(Error::config(format!("{name}.{k}"), e.message().trim().to_string()));
        }
    }
    T::deserialize(value.clone()).map_err(|e| Error::config(name, e.message().trim().to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<toml>", e.message().trim().to_string()))?;
        const SECTIONS: [&str; 6] = ["data", "transforms", "model", "objective", "optim", "eval"];
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::config(k.clone(), "unknown section"));
        }
        let cfg = Self {
            data: section("data", root.get("data"))?,
            transforms: section("transforms", root.get("transforms"))?,
            model: section("model", root.get("model"))?,
            objective: section("objective", root.get("objective"))?,
            optim: section("optim", root.get("optim"))?,
            eval: section("eval", root.get("eval"))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train_config().validate()?;
        self.eval.validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            objective: self.objective.clone(),
            transforms: self.transforms.clone(),
            model: self.model.clone(),
            optim: self.optim.clone(),
        }
    }

    /// The resolved configuration with every default filled in.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }
}

/// Every key with its default value, as a TOML document.
pub fn default_toml() -> String {
    ExperimentConfig::default().to_toml_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_all_defaults() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.transforms.max_token_limit = None;
        cfg.optim.lr_max = 3e-4;
        let text = cfg.to_toml_string();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        assert!(text.contains("max_token_limit = \"none\""));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::from_toml_str("[optim]\nlearning_rate = 1.0\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("optim.learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml_str("[extra]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("extra"), "{err}");
    }

    #[test]
    fn type_error_is_named() {
        let err = ExperimentConfig::from_toml_str("[model]\nd_model = \"wide\"\n").unwrap_err();
        assert!(err.to_string().contains("model.d_model"), "{err}");
    }

    #[test]
    fn lr_min_above_lr_max() {
        let err = ExperimentConfig::from_toml_str("[optim]\nlr_max = 1e-4\nlr_min = 1e-3\n").unwrap_err();
        assert!(err.to_string().contains("optim.lr_min"), "{err}");
    }

    #[test]
    fn default_listing_has_every_section() {
        let text = default_toml();
        for s in ["[data]", "[transforms]", "[model]", "[objective]", "[optim]", "[eval]"] {
            assert!(text.contains(s), "{s} missing");
        }
        assert!(text.contains("grad_shard_size"));
    }
}
