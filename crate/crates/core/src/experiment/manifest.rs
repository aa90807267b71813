use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    /// Output path (relative to the output directory) to SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub data_seed: u64,
    pub seeds: Vec<u64>,
    pub tool_version: String,
    pub commands: BTreeMap<String, CommandRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Schema {
            path,
            message: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::invalid(e.to_string()))?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    /// Records a command's artifacts. When the previous record was made
    /// under the same config hash and seeds, any checksum change is a
    /// determinism defect and is returned as an error (after recording).
    pub fn record(&mut self, command: &str, record: CommandRecord) -> Result<()> {
        let previous = self.commands.insert(command.to_string(), record.clone());
        if let Some(prev) = previous {
            for (artifact, sum) in &record.artifacts {
                if let Some(old) = prev.artifacts.get(artifact) {
                    if old != sum {
                        return Err(Error::Nondeterministic {
                            artifact: artifact.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(sum: &str) -> CommandRecord {
        CommandRecord {
            artifacts: [("a.csv".to_string(), sum.to_string())].into(),
            provenance: BTreeMap::new(),
        }
    }

    #[test]
    fn rerun_with_same_checksum_is_fine() {
        let mut m = Manifest::default();
        m.record("train", rec("00")).unwrap();
        m.record("train", rec("00")).unwrap();
    }

    #[test]
    fn checksum_change_is_a_defect() {
        let mut m = Manifest::default();
        m.record("train", rec("00")).unwrap();
        let e = m.record("train", rec("11")).unwrap_err();
        assert!(matches!(e, Error::Nondeterministic { ref artifact } if artifact == "a.csv"));
        assert_eq!(m.commands["train"], rec("11"));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Manifest {
            config_sha256: "ab".into(),
            data_seed: 3,
            seeds: vec![1, 2],
            tool_version: "0".into(),
            ..Manifest::default()
        };
        m.record("gen-features", rec("ff")).unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(Manifest::load(dir.path()).unwrap(), Some(m));
        assert_eq!(Manifest::load(&dir.path().join("none")).unwrap(), None);
    }
}
