//! Streaming proactive-inference pipeline: chunk-wise decoding over a dual
//! KV cache with exact rotary re-basing, a FLAG-gated response head, the
//! training objective for that head, per-second caption data tooling, and
//! temporal evaluation metrics.

pub mod data;
pub mod kvcache;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rope;
pub mod streaming;
pub mod synthetic;
pub mod tokenizer;

use model::{Model, ModelError, ModelWeights};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokenizer::Tokenizer;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0} (expected {CHECKPOINT_VERSION})")]
    Version(u32),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model + tokenizer bundle, the unit the CLI reads and writes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub tokenizer: Tokenizer,
    pub weights: ModelWeights,
}

impl Checkpoint {
    pub fn new(tokenizer: Tokenizer, weights: ModelWeights) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            tokenizer,
            weights,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let json = std::fs::read_to_string(path)?;
        let mut ckpt: Checkpoint = serde_json::from_str(&json)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        ckpt.tokenizer.rebuild_index();
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<(Model, Tokenizer), CheckpointError> {
        let model = Model::new(self.weights)?;
        Ok((model, self.tokenizer))
    }
}
