//! Weight snapshots: a JSON manifest plus one raw little-endian `f32` blob.
//!
//! `<stem>.json` lists every tensor with its shape and element offset into
//! `<stem>.bin`. Free-form string tags ride along in the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const SNAPSHOT_FORMAT: &str = "srnas-weights";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Named tensors plus string tags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightSnapshot {
    pub tensors: BTreeMap<String, Tensor>,
    pub tags: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    #[serde(default)]
    tags: BTreeMap<String, String>,
    params: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

impl WeightSnapshot {
    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Writes `<stem>.json` and `<stem>.bin`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        if let Some(dir) = stem.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut blob = Vec::with_capacity(self.num_params() * 4);
        let mut params = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for (name, t) in &self.tensors {
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            params.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.len(),
            });
            offset += t.len();
        }
        let manifest = Manifest {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            tags: self.tags.clone(),
            params,
        };
        let bin = with_ext(stem, "bin");
        let json = with_ext(stem, "json");
        fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let json = with_ext(stem, "json");
        let bin = with_ext(stem, "bin");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(json.display().to_string(), e))?;
        if manifest.format != SNAPSHOT_FORMAT || manifest.version != SNAPSHOT_VERSION {
            return Err(Error::parse(
                "format",
                format!("unsupported snapshot {} v{}", manifest.format, manifest.version),
            ));
        }
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let mut tensors = BTreeMap::new();
        for entry in manifest.params {
            let start = entry.offset * 4;
            let end = start + entry.len * 4;
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::parse(format!("params.{}", entry.name), "blob too short")
            })?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(entry.name, Tensor::from_vec(&entry.shape, data)?);
        }
        Ok(WeightSnapshot {
            tensors,
            tags: manifest.tags,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut snap = WeightSnapshot::default();
        snap.tensors.insert(
            "a.weight".into(),
            Tensor::from_vec(&[2, 2], vec![1.0, -0.5, f32::MIN_POSITIVE, 3.25]).unwrap(),
        );
        snap.tensors.insert("b".into(), Tensor::zeros(&[3]));
        snap.tags.insert("scale".into(), "2".into());
        let stem = dir.path().join("w");
        snap.save(&stem).unwrap();
        assert_eq!(WeightSnapshot::load(&stem).unwrap(), snap);
        assert_eq!(fs::metadata(dir.path().join("w.bin")).unwrap().len(), 28);
    }
}
