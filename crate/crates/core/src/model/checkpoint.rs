use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::FeatureScaling;
use crate::diff::ParamStore;
use crate::graph::StandardizeScope;

use super::{ModelError, ReleaseRoute, SagConfig};

pub const FORMAT_VERSION: u32 = 1;

/// The trained networks stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CheckpointModel {
    Sag {
        config: SagConfig,
        routes: Vec<ReleaseRoute>,
        params: ParamStore,
        forecaster: Option<(SagConfig, ParamStore)>,
    },
    Lstm {
        hidden: usize,
        n_features: usize,
        params: ParamStore,
    },
}

/// Self-describing model file: format version, variant, shapes, routing,
/// preprocessing statistics and every named tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: String,
    pub seed: u64,
    pub n_segments: usize,
    pub n_reservoirs: usize,
    /// Release layers `L` the SE head was built for (0 when unused).
    pub n_layers: usize,
    pub train_fraction: f64,
    pub bptt_window: usize,
    #[serde(default)]
    pub adjacency_scope: StandardizeScope,
    pub scaling: FeatureScaling,
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, ModelError> {
        serde_json::to_string_pretty(self).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let mut ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        match &mut ck.model {
            CheckpointModel::Sag { params, forecaster, .. } => {
                params.reindex();
                if let Some((_, f)) = forecaster {
                    f.reindex();
                }
            }
            CheckpointModel::Lstm { params, .. } => params.reindex(),
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn read(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
