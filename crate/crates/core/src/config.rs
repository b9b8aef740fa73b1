//! Experiment configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ComparisonConfig;
use crate::federation::HyperParams;
use crate::meta::MetaConfig;
use crate::simnet::CostModel;
use crate::traffic::ScenarioSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub hyper: HyperParams,
    pub meta: MetaConfig,
    pub cost: CostModel,
    #[serde(default)]
    pub comparison: ComparisonConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioSpec::default(),
            hyper: HyperParams::default(),
            meta: MetaConfig::default(),
            cost: CostModel::default(),
            comparison: ComparisonConfig::default(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.hyper.validate()?;
        self.meta.validate()?;
        self.cost.validate()?;
        self.comparison.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::invalid("seeds", "must not be empty"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("seeds", "must be distinct"));
        }
        Ok(())
    }

    /// Parses and validates a config. A run manifest (`{"config": {...}, ...}`)
    /// is accepted too, so manifests can be replayed directly.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::invalid("<document>", e.to_string()))?;
        let value = match value.get("config") {
            Some(inner) if value.get("command").is_some() => inner.clone(),
            _ => value,
        };
        let cfg: Self = serde_json::from_value(value).map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serializable")
    }
}

/// Maps serde's message (which names the offending key) onto a config error.
fn config_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string());
    Error::InvalidConfig { field, reason: msg }
}
