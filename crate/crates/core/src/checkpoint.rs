//! Versioned JSON checkpoints holding a backbone and optional head state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embeddings::Backbone;
use crate::error::{Error, Result};
use crate::heads::{HeadConfig, HeadState};
use crate::numerics::ParamSet;

pub const CHECKPOINT_FORMAT: &str = "fewshot-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub fingerprint: String,
    /// Training phase and step that produced the checkpoint.
    pub phase: String,
    pub step: usize,
    pub backbone: Backbone,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_state: Option<HeadState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<ParamSet>,
}

impl Checkpoint {
    pub fn new(fingerprint: impl Into<String>, phase: impl Into<String>, step: usize, backbone: Backbone) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            fingerprint: fingerprint.into(),
            phase: phase.into(),
            step,
            backbone,
            head: None,
            head_state: None,
            relation: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Ingestion(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        ckpt.backbone.config.validate()?;
        Ok(ckpt)
    }
}

/// Short stable digest of a JSON value (keys are emitted in sorted order).
pub fn fingerprint(value: &serde_json::Value) -> String {
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{build_backbone, BackboneConfig};
    use crate::heads::{self, HeadKind};

    #[test]
    fn round_trip_is_bit_exact() {
        let backbone = build_backbone(BackboneConfig::Mlp { widths: vec![3, 5, 2] }, 17).unwrap();
        let mut ckpt = Checkpoint::new("abc", "meta_train", 10, backbone);
        ckpt.head = Some(HeadConfig::new(HeadKind::Relation));
        ckpt.relation = Some(heads::relation_init(2, 4, 3));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        ckpt.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.backbone.params.checksum(), ckpt.backbone.params.checksum());
    }

    #[test]
    fn fingerprint_is_order_independent() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":[1,2]}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":[1,2],"b":1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        assert_eq!(fingerprint(&a).len(), 16);
    }
}
