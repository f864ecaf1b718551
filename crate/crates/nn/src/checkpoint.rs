use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::LayerParams;

pub const CHECKPOINT_FORMAT: &str = "mitodet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named layer parameters plus caller-defined metadata, stored as JSON.
///
/// Layers are kept in a sorted map so the serialized bytes depend only on
/// the contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub layers: BTreeMap<String, LayerParams>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, layers: BTreeMap<String, LayerParams>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            meta,
            layers,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serialization is infallible")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NnError::Checkpoint(format!(
                "unexpected format tag `{}`",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        for (name, layer) in &ck.layers {
            layer
                .check_congruent()
                .map_err(|e| NnError::Checkpoint(format!("layer `{name}`: {e}")))?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| NnError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    pub fn layer(&self, name: &str) -> Result<&LayerParams> {
        self.layers
            .get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing layer `{name}`")))
    }
}
