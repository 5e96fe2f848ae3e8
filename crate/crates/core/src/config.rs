//! One JSON document configuring every stage, with dotted `key=value`
//! overrides.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::BaselineConfig;
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::foundation::StubConfig;
use crate::hingenet::HingeConfig;
use crate::model::MethodKind;
use crate::postprocess::DbnConfig;
use crate::train::{AblationSpec, CompareSpec, TrainConfig};

/// Stub width used by experiments: divisible by every projection factor
/// in {2, 4, 6, 8} and wide enough at r = 8 for a dilation-12 kernel.
pub const EXPERIMENT_HIDDEN: usize = 120;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: MethodKind,
    pub jobs: usize,
    pub data: SyntheticConfig,
    pub stub: StubConfig,
    pub hinge: HingeConfig,
    pub baseline: BaselineConfig,
    pub train: TrainConfig,
    pub dbn: DbnConfig,
    pub ablation: AblationSpec,
    pub compare: CompareSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: MethodKind::Hinge,
            jobs: 1,
            data: SyntheticConfig::default(),
            stub: StubConfig {
                hidden: EXPERIMENT_HIDDEN,
                ..StubConfig::default()
            },
            hinge: HingeConfig::default(),
            baseline: BaselineConfig::default(),
            train: TrainConfig::default(),
            dbn: DbnConfig::default(),
            ablation: AblationSpec::default(),
            compare: CompareSpec::default(),
        }
    }
}

/// Dotted paths of every leaf in `v`.
fn leaf_keys(v: &Value, prefix: &str, out: &mut Vec<String>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                if child.is_object() {
                    leaf_keys(child, &key, out);
                } else {
                    out.push(key);
                }
            }
        }
        _ => out.push(prefix.to_string()),
    }
}

impl ExperimentConfig {
    pub fn valid_keys() -> Vec<String> {
        let mut keys = Vec::new();
        leaf_keys(&serde_json::to_value(Self::default()).expect("serialisable"), "", &mut keys);
        keys
    }

    fn unknown_key(key: &str) -> Error {
        Error::Config(format!("unknown key {key:?}; valid keys: {}", Self::valid_keys().join(", ")))
    }

    /// Parse a JSON document; absent keys keep their defaults, unknown
    /// keys are rejected with the list of valid ones.
    pub fn from_json(text: &str) -> Result<Self> {
        let given: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not JSON: {e}")))?;
        let defaults = serde_json::to_value(Self::default())?;
        check_known(&given, &defaults, "")?;
        serde_json::from_value(given).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `key=value`; the value is read as JSON when it parses as
    /// JSON and as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Self::unknown_key(key))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!("{key:?} is a section, not a value")));
        }
        *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Copy the top-level seed into every stage that draws randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.stub.validate()?;
        self.train.validate()?;
        self.dbn.validate()?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_known(given: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    let (Value::Object(g), Value::Object(d)) = (given, defaults) else {
        return Ok(());
    };
    for (k, v) in g {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match d.get(k) {
            None => return Err(ExperimentConfig::unknown_key(&key)),
            Some(dv) => check_known(v, dv, &key)?,
        }
    }
    Ok(())
}
