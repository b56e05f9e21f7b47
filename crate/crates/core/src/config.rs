//! The run configuration file: one JSON document, every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::{InferenceConfig, ModelConfig, TrainConfig};
use crate::protocol::{BenchmarkConfig, ProtocolConfig};

pub const CONFIG_VERSION: u32 = 1;

fn current_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    #[serde(default = "current_version")]
    pub config_version: u32,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricConfig,
    pub protocol: ProtocolConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::from(BenchmarkConfig::default())
    }
}

impl From<BenchmarkConfig> for RunConfig {
    fn from(b: BenchmarkConfig) -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            dataset: b.dataset,
            model: b.model,
            train: b.train,
            inference: b.inference,
            metrics: b.metrics,
            protocol: b.protocol,
        }
    }
}

impl RunConfig {
    /// Parses and validates. Any problem is a configuration error.
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(s).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(Error::config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                cfg.config_version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.benchmark().validate()
    }

    pub fn benchmark(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            dataset: self.dataset.clone(),
            model: self.model,
            train: self.train.clone(),
            inference: self.inference,
            metrics: self.metrics,
            protocol: self.protocol.clone(),
        }
    }

    /// Makes `seed` the only seed of every stage.
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.train.seed = seed;
        self.protocol.seeds = vec![seed];
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.lr, 2e-3);
        assert_eq!(cfg.train.batch_size, 5);
        assert_eq!(cfg.train.momentum, 0.1);
        assert_eq!(cfg.inference.tau, 1.3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for s in [r#"{"bogus": 1}"#, r#"{"train": {"lr": 0.1, "lrr": 2}}"#] {
            assert!(RunConfig::from_json(s).unwrap_err().is_config(), "{s}");
        }
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for s in [
            r#"{"train": {"lr": 0}}"#,
            r#"{"train": {"batch_size": 0}}"#,
            r#"{"inference": {"tau": -1}}"#,
            r#"{"protocol": {"exemplars_per_class": 0}}"#,
            r#"{"dataset": {"task_schedule": [[0, 1], [1]]}}"#,
            r#"{"config_version": 7}"#,
        ] {
            assert!(RunConfig::from_json(s).unwrap_err().is_config(), "{s}");
        }
    }

    #[test]
    fn json_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(9);
        let s = cfg.to_json().unwrap();
        assert_eq!(RunConfig::from_json(&s).unwrap(), cfg);
    }
}
