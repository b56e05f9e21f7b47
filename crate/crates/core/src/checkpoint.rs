//! Detector checkpoints as JSON documents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_VERSION};
use crate::error::{Error, Result};
use crate::model::Detector;
use crate::protocol::{ExemplarSet, TaskState};
use crate::report::write_atomic;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    /// Last task the detector was trained on.
    pub task: usize,
    /// Optimizer steps since initialization.
    pub step: u64,
    pub seed: u64,
    pub detector: Detector,
    pub exemplars: ExemplarSet,
    pub config: RunConfig,
}

impl Checkpoint {
    pub fn new(state: &TaskState, task: usize, config: &RunConfig) -> Self {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            task,
            step: state.steps,
            seed: config.train.seed,
            detector: state.detector.clone(),
            exemplars: state.exemplars.clone(),
            config: config.clone(),
        }
    }

    pub fn state(&self) -> TaskState {
        TaskState {
            detector: self.detector.clone(),
            exemplars: self.exemplars.clone(),
            steps: self.step,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Checks both version fields before decoding the rest.
    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Versions {
            schema_version: u32,
            config: ConfigVersion,
        }
        #[derive(Deserialize)]
        struct ConfigVersion {
            config_version: u32,
        }
        let v: Versions = serde_json::from_str(s)?;
        if v.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Version {
                what: "checkpoint schema",
                found: v.schema_version,
                expected: CHECKPOINT_SCHEMA_VERSION,
            });
        }
        if v.config.config_version != CONFIG_VERSION {
            return Err(Error::Version {
                what: "checkpoint config",
                found: v.config.config_version,
                expected: CONFIG_VERSION,
            });
        }
        let ck: Checkpoint = serde_json::from_str(s)?;
        ck.detector.gaussian.validate()?;
        if !ck.detector.params.is_finite() {
            return Err(Error::domain("checkpoint contains non-finite parameters"));
        }
        if ck.detector.known_classes.len() != ck.detector.params.num_classes()
            || ck.detector.gaussian.dim() != ck.detector.params.embed_dim()
        {
            return Err(Error::domain("checkpoint tensor shapes are inconsistent"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_json(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::gradcheck::toy_problem;

    fn sample() -> Checkpoint {
        let toy = toy_problem(4, 1, 3);
        let state = TaskState {
            detector: toy.detector,
            exemplars: ExemplarSet::default(),
            steps: 17,
        };
        Checkpoint::new(&state, 0, &RunConfig::default())
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let ck = sample();
        let s = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&s).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.detector.params.tensors().iter().zip(ck.detector.params.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.to_json().unwrap(), s);
    }

    #[test]
    fn version_mismatches_are_version_errors() {
        let s = sample().to_json().unwrap();
        let bad_config = s.replacen("\"config_version\": 1", "\"config_version\": 2", 1);
        assert!(matches!(
            Checkpoint::from_json(&bad_config),
            Err(Error::Version { found: 2, .. })
        ));
        let bad_schema = s.replacen("\"schema_version\": 1", "\"schema_version\": 999", 1);
        assert!(matches!(
            Checkpoint::from_json(&bad_schema),
            Err(Error::Version { found: 999, .. })
        ));
    }
}
