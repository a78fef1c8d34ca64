use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadConfig, HeadError, HeadModel};
use crate::backbones::BackboneId;

pub const ARTIFACT_FORMAT: &str = "baved-ser-head";
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON form of trained head weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadArtifact {
    pub format: String,
    pub version: u32,
    pub backbone: BackboneId,
    pub input_dim: usize,
    pub config: HeadConfig,
    pub seed: u64,
    pub final_epoch: usize,
    pub tensors: Vec<NamedTensor>,
}

impl HeadArtifact {
    pub fn from_model(
        model: &HeadModel,
        backbone: BackboneId,
        config: HeadConfig,
        seed: u64,
        final_epoch: usize,
    ) -> Self {
        HeadArtifact {
            format: ARTIFACT_FORMAT.to_string(),
            version: ARTIFACT_VERSION,
            backbone,
            input_dim: model.input_dim(),
            config,
            seed,
            final_epoch,
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(name, shape, data)| NamedTensor { name, shape, data: data.to_vec() })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<HeadModel, HeadError> {
        HeadModel::from_tensors(&self.config, self.input_dim, &self.tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, HeadError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| HeadError::Artifact(e.to_string()))?;
        let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        let version = value.get("version").and_then(|v| v.as_u64());
        if format != ARTIFACT_FORMAT {
            return Err(HeadError::Artifact(format!("unknown format {format:?}")));
        }
        if version != Some(ARTIFACT_VERSION as u64) {
            return Err(HeadError::Artifact(format!("unsupported version {version:?}")));
        }
        serde_json::from_value(value).map_err(|e| HeadError::Artifact(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HeadError> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(self.to_json().as_bytes())?;
        tmp.persist(path).map_err(|e| HeadError::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HeadError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
