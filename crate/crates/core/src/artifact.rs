//! Provenance stanza attached to every file the pipeline writes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

/// Crate version recorded in artifact headers.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHeader {
    /// What the file holds (`windows`, `checkpoint`, `eval_report`, ...).
    pub kind: String,
    pub version: String,
    pub seed: u64,
    /// Hex SHA-256 of the configuration's canonical JSON.
    pub config_hash: String,
}

impl ArtifactHeader {
    pub fn new<C: Serialize>(kind: impl Into<String>, seed: u64, config: &C) -> Result<Self> {
        Ok(ArtifactHeader {
            kind: kind.into(),
            version: VERSION.to_string(),
            seed,
            config_hash: config_hash(config)?,
        })
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("header serializes")
    }
}

/// SHA-256 of the compact JSON encoding of `config`.
///
/// Struct fields serialize in declaration order and maps through `BTreeMap`,
/// so equal configurations always hash equally.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = serde_json::json!({"k": 25, "alpha": 1.0});
        let b = serde_json::json!({"k": 24, "alpha": 1.0});
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
        assert_eq!(config_hash(&a).unwrap().len(), 64);
    }

    #[test]
    fn header_round_trips() {
        let h = ArtifactHeader::new("checkpoint", 7, &"cfg").unwrap();
        let back: ArtifactHeader = serde_json::from_value(h.to_value()).unwrap();
        assert_eq!(back, h);
        assert_eq!(back.version, VERSION);
    }
}
