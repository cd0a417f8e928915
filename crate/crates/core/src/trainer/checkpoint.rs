//! JSON checkpoints. Floats are written with round-trip precision, so a
//! saved and reloaded checkpoint reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::heads::{Model, ModelSpec};
use crate::math::ParamStore;
use crate::optim::AdamState;

pub const CHECKPOINT_FORMAT: &str = "dtm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub epochs_done: usize,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, model: &Model, adam: &AdamState, step: usize, epochs_done: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            seed: config.seed,
            spec: model.spec().clone(),
            params: model.params().clone(),
            adam: adam.clone(),
            step,
            epochs_done,
        }
    }

    /// Rebuilds the model, checking parameter names and shapes against the spec.
    pub fn model(&self) -> Result<Model> {
        Model::from_parts(self.spec.clone(), self.params.clone())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::data(format!("checkpoint: {e}")))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::data(format!("checkpoint: unexpected format '{}'", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!("checkpoint: unsupported version {}", ck.version)));
        }
        if ck.config_hash != ck.config.hash() {
            return Err(Error::data("checkpoint: config hash does not match its config"));
        }
        let model = ck.model()?;
        ck.adam.check_shapes(model.params())?;
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
