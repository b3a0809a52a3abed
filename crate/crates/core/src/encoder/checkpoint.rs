use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint. Reals are written in shortest round-trip decimal form and
/// parsed back exactly, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// Free-form role label, e.g. `teacher` or `student`.
    pub role: String,
    pub params: EncoderParams,
}

pub fn save_checkpoint(path: &Path, role: &str, params: &EncoderParams) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    let ck = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        role: role.to_string(),
        params: params.clone(),
    };
    let text = serde_json::to_string(&ck).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
    if ck.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ck.format_version
        )));
    }
    for l in ck.params.trunk.iter().chain(ck.params.projector.iter()).chain(ck.params.matcher.iter()) {
        if l.bias.len() != l.weight.rows() {
            return Err(Error::Format("bias length does not match weight rows".into()));
        }
    }
    Ok(ck)
}
