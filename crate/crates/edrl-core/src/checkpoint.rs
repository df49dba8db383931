//! Model checkpoints: config, every named parameter tensor, the guiding
//! rng position, and the epoch, in the shared container format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::EdrlConfig;
use crate::container::{read_container, write_container, Blob};
use crate::error::{Error, FormatError, Result};
use crate::model::EdrlModel;
use crate::rng::RngSnapshot;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: EdrlConfig,
    rng: RngSnapshot,
    epoch: usize,
}

pub fn save_checkpoint(
    path: &Path,
    model: &EdrlModel,
    rng: &RngSnapshot,
    epoch: usize,
) -> Result<()> {
    let meta = CheckpointMeta { config: model.config.clone(), rng: rng.clone(), epoch };
    let blobs = model
        .parameters()
        .into_iter()
        .map(|(name, t)| Blob::new(name, t.shape().to_vec(), t.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let meta = serde_json::to_value(&meta)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint meta: {e}")))?;
    write_container(path, "checkpoint", meta, &blobs)
}

pub fn load_checkpoint(path: &Path) -> Result<(EdrlModel, RngSnapshot, usize)> {
    let (meta, blobs) = read_container(path, "checkpoint")?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Format(FormatError::BadHeader(e.to_string())))?;
    let model = EdrlModel::new(&meta.config)?;
    let values: Vec<(String, Vec<f64>)> =
        blobs.into_iter().map(|b| (b.name, b.data)).collect();
    model.load_values(&values)?;
    Ok((model, meta.rng, meta.epoch))
}
