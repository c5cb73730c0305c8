use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::io_util::write_atomic;
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized form of [`ModelParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<CheckpointParam>,
}

impl From<&ModelParams> for Checkpoint {
    fn from(p: &ModelParams) -> Self {
        let store = p.store();
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: *p.config(),
            params: store
                .ids()
                .map(|id| {
                    let t = store.get(id);
                    CheckpointParam {
                        name: store.name(id).to_string(),
                        rows: t.rows(),
                        cols: t.cols(),
                        data: t.data().to_vec(),
                    }
                })
                .collect(),
        }
    }
}

impl TryFrom<Checkpoint> for ModelParams {
    type Error = ModelError;

    fn try_from(ck: Checkpoint) -> Result<Self, Self::Error> {
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        let mut params = ModelParams::init(ck.config, 0)?;
        if ck.params.len() != params.store().len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors, architecture has {}",
                ck.params.len(),
                params.store().len()
            )));
        }
        for entry in ck.params {
            let id = params
                .store()
                .find(&entry.name)
                .ok_or_else(|| ModelError::Checkpoint(format!("unknown parameter `{}`", entry.name)))?;
            let expected = params.store().get(id).shape();
            if expected != (entry.rows, entry.cols) {
                return Err(ModelError::Checkpoint(format!(
                    "`{}` is {}x{}, expected {}x{}",
                    entry.name, entry.rows, entry.cols, expected.0, expected.1
                )));
            }
            let t = Tensor::from_vec(entry.rows, entry.cols, entry.data)
                .map_err(|e| ModelError::Checkpoint(format!("`{}`: {e}", entry.name)))?;
            *params.store_mut().get_mut(id) = t;
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let json = serde_json::to_vec_pretty(&Checkpoint::from(params)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    write_atomic(path.as_ref(), &json).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_slice(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ModelParams::try_from(ck)
}
