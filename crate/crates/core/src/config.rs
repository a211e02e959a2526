//! TOML run configuration shared by the command-line tools.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::graph::StandardizeScope;
use crate::pipeline::{RunSpec, Variant};
use crate::train::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Variant selection and experiment layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub variant: String,
    /// Variants of an `experiment` run.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Reservoirs routed to SE by `sag-ppx`.
    pub se_reservoirs: Option<Vec<usize>>,
    pub adjacency_scope: StandardizeScope,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            variant: Variant::SagPp.name().to_string(),
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            seeds: vec![0],
            se_reservoirs: None,
            adjacency_scope: StandardizeScope::Global,
        }
    }
}

/// Complete configuration file: `[synth]`, `[train]` and `[run]` tables,
/// each optional and each rejecting unknown keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// Default configuration when `path` is `None`.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn variant(&self) -> Result<Variant, ConfigError> {
        parse_variant(&self.run.variant)
    }

    pub fn variants(&self) -> Result<Vec<Variant>, ConfigError> {
        if self.run.variants.is_empty() {
            return Err(ConfigError::Invalid("run.variants is empty".into()));
        }
        self.run.variants.iter().map(|v| parse_variant(v)).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.variant()?;
        self.variants()?;
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds is empty".into()));
        }
        Ok(())
    }

    /// Training specification for `variant` and the configured train table.
    pub fn spec(&self, variant: Variant) -> RunSpec {
        RunSpec {
            variant,
            se_reservoirs: self.run.se_reservoirs.clone(),
            adjacency_scope: self.run.adjacency_scope,
            train: self.train.clone(),
        }
    }
}

fn parse_variant(name: &str) -> Result<Variant, ConfigError> {
    name.parse().map_err(|_| ConfigError::Invalid(format!("unknown variant `{name}`")))
}
