//! Run manifest: the provenance record that makes a run re-derivable.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BackendDescriptor;

use super::runner::PipelineError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub artifacts: Vec<String>,
    pub completed_at: String,
}

/// With deterministic backends, identical digests reproduce identical
/// outputs; the manifest pins everything a re-run needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub code_version: String,
    pub backend: BackendDescriptor,
    pub template_version: String,
    pub dataset_hash: String,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn new(
        config_digest: &str,
        backend: BackendDescriptor,
        dataset_hash: &str,
    ) -> Self {
        RunManifest {
            config_digest: config_digest.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            backend,
            template_version: crate::generation::TEMPLATE_VERSION.to_string(),
            dataset_hash: dataset_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    pub fn record_stage(&mut self, stage: &str, artifacts: Vec<String>) {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                artifacts,
                completed_at: chrono::Utc::now().to_rfc3339(),
            },
        );
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))
    }
}
