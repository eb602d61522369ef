//! Per-(node, operation) cache of the best trained weights seen so far.
//!
//! Weights for operation `o` at node `i` are replaced only when the whole
//! model that trained them scores strictly better than every earlier model
//! that placed `o` at `i`. Replacement is all-or-nothing.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelbuilder::node_param_shapes;
use crate::searchspace::OpKind;
use crate::tensorkit::WeightSnapshot;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    /// 1-based node index.
    pub node: usize,
    pub op: OpKind,
}

#[derive(Clone, Debug)]
pub struct CacheEntry {
    pub weights: Arc<WeightSnapshot>,
    pub best_metric: f64,
    pub step: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommitOutcome {
    Accepted,
    Rejected,
}

/// Thread-safe weight cache. Readers get shared immutable snapshots.
#[derive(Debug)]
pub struct WeightCache {
    channels: usize,
    entries: RwLock<HashMap<CacheKey, CacheEntry>>,
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    version: u32,
    channels: usize,
    entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    node: usize,
    op: String,
    best_metric: f64,
    step: u64,
    file: String,
}

impl WeightCache {
    /// Empty cache for cells with `channels` feature maps.
    pub fn new(channels: usize) -> Self {
        WeightCache {
            channels,
            entries: RwLock::new(HashMap::new()),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lookup(&self, node: usize, op: OpKind) -> Option<Arc<WeightSnapshot>> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&CacheKey { node, op })
            .map(|e| Arc::clone(&e.weights))
    }

    pub fn entry(&self, node: usize, op: OpKind) -> Option<CacheEntry> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .get(&CacheKey { node, op })
            .cloned()
    }

    pub fn best_metric(&self, node: usize, op: OpKind) -> Option<f64> {
        self.entry(node, op).map(|e| e.best_metric)
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Every entry, ordered by key.
    pub fn entries(&self) -> BTreeMap<CacheKey, CacheEntry> {
        self.entries
            .read()
            .expect("cache lock poisoned")
            .iter()
            .map(|(k, v)| (*k, v.clone()))
            .collect()
    }

    fn check_shapes(&self, op: OpKind, weights: &WeightSnapshot) -> Result<()> {
        let expected = node_param_shapes(op, self.channels);
        let names_match = expected.len() == weights.tensors.len();
        for (name, shape) in &expected {
            let actual = weights.tensors.get(name).map(|t| t.shape().to_vec());
            if !names_match || actual.as_deref() != Some(shape.as_slice()) {
                return Err(Error::ShapeMismatch {
                    name: format!("{op}.{name}"),
                    expected: shape.clone(),
                    actual: actual.unwrap_or_default(),
                });
            }
        }
        Ok(())
    }

    /// Stores `weights` iff `metric` strictly exceeds the entry's best (or
    /// the entry is absent). Compare and swap happen under one write lock.
    pub fn commit(
        &self,
        node: usize,
        op: OpKind,
        weights: WeightSnapshot,
        metric: f64,
        step: u64,
    ) -> Result<CommitOutcome> {
        if !metric.is_finite() {
            return Err(Error::NonFiniteMetric(metric));
        }
        self.check_shapes(op, &weights)?;
        let mut map = self.entries.write().expect("cache lock poisoned");
        let key = CacheKey { node, op };
        match map.get(&key) {
            Some(e) if metric <= e.best_metric => Ok(CommitOutcome::Rejected),
            _ => {
                map.insert(
                    key,
                    CacheEntry {
                        weights: Arc::new(weights),
                        best_metric: metric,
                        step,
                    },
                );
                Ok(CommitOutcome::Accepted)
            }
        }
    }

    /// Writes one snapshot per entry plus `index.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = IndexFile {
            version: 1,
            channels: self.channels,
            entries: Vec::new(),
        };
        for (key, entry) in self.entries() {
            let file = format!("node{}_{}", key.node, key.op.slug());
            entry.weights.save(&dir.join(&file))?;
            index.entries.push(IndexEntry {
                node: key.node,
                op: key.op.slug(),
                best_metric: entry.best_metric,
                step: entry.step,
                file,
            });
        }
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index).expect("index serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: IndexFile =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        let cache = WeightCache::new(index.channels);
        {
            let mut map = cache.entries.write().expect("cache lock poisoned");
            for (i, e) in index.entries.into_iter().enumerate() {
                let op = OpKind::from_slug(&e.op)
                    .ok_or_else(|| Error::parse(format!("entries[{i}].op"), "unknown op"))?;
                let weights = WeightSnapshot::load(&dir.join(&e.file))?;
                cache.check_shapes(op, &weights)?;
                map.insert(
                    CacheKey { node: e.node, op },
                    CacheEntry {
                        weights: Arc::new(weights),
                        best_metric: e.best_metric,
                        step: e.step,
                    },
                );
            }
        }
        Ok(cache)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorkit::Tensor;

    pub(crate) fn weights_for(op: OpKind, n: usize, fill: f32) -> WeightSnapshot {
        let mut s = WeightSnapshot::default();
        for (name, shape) in node_param_shapes(op, n) {
            s.tensors.insert(name, Tensor::full(&shape, fill));
        }
        s
    }

    const CONV3: OpKind = OpKind::Conv { k: 3 };

    #[test]
    fn fresh_cache_misses() {
        let c = WeightCache::new(16);
        for op in crate::searchspace::OPS {
            for node in 1..=10 {
                assert!(c.lookup(node, op).is_none());
            }
        }
    }

    #[test]
    fn commit_then_lookup_is_per_op() {
        let c = WeightCache::new(16);
        let w = weights_for(CONV3, 16, 0.5);
        assert_eq!(c.commit(2, CONV3, w.clone(), 30.0, 1).unwrap(), CommitOutcome::Accepted);
        assert_eq!(*c.lookup(2, CONV3).unwrap(), w);
        assert!(c.lookup(2, OpKind::Conv { k: 5 }).is_none());
        assert!(c.lookup(3, CONV3).is_none());
    }

    #[test]
    fn ties_are_rejected() {
        let c = WeightCache::new(16);
        c.commit(1, CONV3, weights_for(CONV3, 16, 1.0), 30.0, 1).unwrap();
        let out = c.commit(1, CONV3, weights_for(CONV3, 16, 2.0), 30.0, 2).unwrap();
        assert_eq!(out, CommitOutcome::Rejected);
        assert_eq!(c.lookup(1, CONV3).unwrap().tensors.values().next().unwrap().data()[0], 1.0);
    }

    #[test]
    fn wrong_shapes_are_rejected() {
        let c = WeightCache::new(16);
        let err = c.commit(1, CONV3, weights_for(OpKind::Conv { k: 5 }, 16, 0.0), 1.0, 1);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        let err = c.commit(1, CONV3, weights_for(CONV3, 8, 0.0), 1.0, 1);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let c = WeightCache::new(16);
        c.commit(4, OpKind::SeBlock, weights_for(OpKind::SeBlock, 16, 0.25), 31.5, 7).unwrap();
        c.commit(1, OpKind::Identity, weights_for(OpKind::Identity, 16, 0.1), 29.0, 3).unwrap();
        c.save(dir.path()).unwrap();
        let back = WeightCache::load(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.best_metric(4, OpKind::SeBlock), Some(31.5));
        assert_eq!(*back.lookup(1, OpKind::Identity).unwrap(), weights_for(OpKind::Identity, 16, 0.1));
    }
}
