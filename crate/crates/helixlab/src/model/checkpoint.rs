//! Checkpoint files: container with the model config, task, step, and
//! metrics in the manifest and one blob entry per parameter.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::container::{read_container, write_container};
use crate::model::transformer::ToyTransformer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: ModelConfig,
    pub task: Option<String>,
    pub step: usize,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

pub fn save_checkpoint(model: &ToyTransformer, meta: &CheckpointMeta, dir: &Path) -> Result<()> {
    let arrays: Vec<(String, &crate::numerics::Tensor)> =
        model.params().iter().map(|(n, t)| (n.clone(), t)).collect();
    write_container(dir, serde_json::to_value(meta)?, &arrays)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ToyTransformer, CheckpointMeta)> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::MissingArtifact {
            path: dir.display().to_string(),
            producer: "helixlab train".into(),
        });
    }
    let (meta_value, arrays) = read_container(dir)?;
    let meta: CheckpointMeta = serde_json::from_value(meta_value)
        .map_err(|e| Error::DumpFormat(format!("checkpoint manifest: {e}")))?;
    if meta.kind != "checkpoint" {
        return Err(Error::DumpFormat(format!("expected kind=checkpoint, got {}", meta.kind)));
    }
    let params: BTreeMap<String, crate::numerics::Tensor> = arrays.into_iter().collect();
    let model = ToyTransformer::from_params(meta.config.clone(), params)?;
    Ok((model, meta))
}
