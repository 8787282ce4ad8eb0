//! Exact cosine k-NN over shape embeddings, persisted as SIDX v1.
//!
//! SIDX v1 layout (little-endian): `SIDX`, version, D, count, 32-byte
//! encoder fingerprint, then per entry: id length, UTF-8 id, class length,
//! UTF-8 class, D `f32` values.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use serde::Serialize;

use crate::encoders::{Embedding, Fingerprint, UNIT_TOL};
use crate::io::Reader;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SIDX";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub shape_id: String,
    pub class_id: String,
    pub values: Vec<f32>,
    norm: f64,
}

impl IndexEntry {
    fn new(shape_id: String, class_id: String, values: Vec<f32>) -> Self {
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        Self {
            shape_id,
            class_id,
            values,
            norm,
        }
    }
}

/// Immutable store of unit-norm shape embeddings, kept sorted by shape id.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    fingerprint: Fingerprint,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub shape_id: String,
    pub class_id: String,
    pub similarity: f64,
}

/// Hits ranked by decreasing similarity, ties by ascending shape id.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub k: usize,
    pub hits: Vec<Hit>,
}

impl RetrievalResult {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.hits.iter().map(|h| h.shape_id.as_str())
    }
}

/// Builds an index from `(shape_id, class_id, embedding)` triples.
pub fn build_index(items: Vec<(String, String, Embedding)>, fingerprint: Fingerprint) -> Result<ShapeIndex> {
    if items.is_empty() {
        return Err(Error::param("cannot build an empty index"));
    }
    let dim = items[0].2.dim();
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(items.len());
    for (shape_id, class_id, e) in items {
        if e.dim() != dim {
            return Err(Error::Dimension {
                expected: dim,
                actual: e.dim(),
            });
        }
        let norm = e.dot(&e).sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::Precondition(format!("embedding for `{shape_id}` has norm {norm}")));
        }
        if !seen.insert(shape_id.clone()) {
            return Err(Error::DuplicateId(shape_id));
        }
        let values = e.as_slice().iter().map(|&v| v as f32).collect();
        entries.push(IndexEntry::new(shape_id, class_id, values));
    }
    entries.sort_by(|a, b| a.shape_id.cmp(&b.shape_id));
    Ok(ShapeIndex {
        entries,
        dim,
        fingerprint,
    })
}

impl ShapeIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn contains(&self, shape_id: &str) -> bool {
        self.position(shape_id).is_some()
    }

    fn position(&self, shape_id: &str) -> Option<usize> {
        self.entries
            .binary_search_by(|e| e.shape_id.as_str().cmp(shape_id))
            .ok()
    }

    /// Number of entries labelled `class_id`.
    pub fn class_size(&self, class_id: &str) -> usize {
        self.entries.iter().filter(|e| e.class_id == class_id).count()
    }

    /// Cosine similarity of the query with every entry, in id order.
    /// Entries are stored as `f32`, so cosines use their exact stored norms.
    pub fn similarities(&self, q: &[f64]) -> Result<Vec<f64>> {
        if q.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: q.len(),
            });
        }
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(qn > 0.0 && qn.is_finite()) {
            return Err(Error::Precondition("query has zero or non-finite norm".into()));
        }
        Ok(self
            .entries
            .iter()
            .map(|e| {
                let dot: f64 = e.values.iter().zip(q).map(|(&a, b)| f64::from(a) * b).sum();
                (dot / (e.norm * qn)).clamp(-1.0, 1.0)
            })
            .collect())
    }

    /// Exact top-k by cosine similarity.
    pub fn query(&self, q: &Embedding, k: usize) -> Result<RetrievalResult> {
        if k == 0 {
            return Err(Error::param("k must be at least 1"));
        }
        let sims = self.similarities(q.as_slice())?;
        let mut order: Vec<usize> = (0..sims.len()).collect();
        // Entries are id-sorted, so index order breaks ties by id.
        let cmp = |a: &usize, b: &usize| match sims[*b].partial_cmp(&sims[*a]) {
            Some(Ordering::Equal) | None => a.cmp(b),
            Some(o) => o,
        };
        let take = k.min(order.len());
        if take < order.len() {
            order.select_nth_unstable_by(take - 1, cmp);
            order.truncate(take);
        }
        order.sort_unstable_by(cmp);
        let hits = order
            .into_iter()
            .map(|i| Hit {
                shape_id: self.entries[i].shape_id.clone(),
                class_id: self.entries[i].class_id.clone(),
                similarity: sims[i],
            })
            .collect();
        Ok(RetrievalResult { k, hits })
    }

    /// 1-based rank `shape_id` would take in a full ranking for `q`.
    pub fn rank_of(&self, q: &Embedding, shape_id: &str) -> Result<usize> {
        let pos = self
            .position(shape_id)
            .ok_or_else(|| Error::param(format!("shape `{shape_id}` is not indexed")))?;
        let sims = self.similarities(q.as_slice())?;
        let target = sims[pos];
        Ok(1 + sims
            .iter()
            .enumerate()
            .filter(|&(i, &s)| s > target || (s == target && i < pos))
            .count())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fingerprint.0);
        for e in &self.entries {
            for s in [&e.shape_id, &e.class_id] {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            for v in &e.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "SIDX index");
        if r.take(4)? != MAGIC {
            return Err(Error::format("bad SIDX magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported SIDX version {version}")));
        }
        let dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        if dim == 0 || count == 0 {
            return Err(Error::format("SIDX header declares an empty index"));
        }
        let fingerprint = Fingerprint(r.take(32)?.try_into().unwrap());
        let mut entries: Vec<IndexEntry> = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let mut text = || -> Result<String> {
                let len = r.u32()? as usize;
                String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("SIDX string is not UTF-8"))
            };
            let shape_id = text()?;
            let class_id = text()?;
            let values = (0..dim).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
            if let Some(prev) = entries.last() {
                if prev.shape_id >= shape_id {
                    return Err(Error::format("SIDX entries are not sorted by unique id"));
                }
            }
            let entry = IndexEntry::new(shape_id, class_id, values);
            if (entry.norm - 1.0).abs() > UNIT_TOL {
                return Err(Error::format(format!("SIDX entry `{}` is not unit norm", entry.shape_id)));
            }
            entries.push(entry);
        }
        r.finish()?;
        Ok(ShapeIndex {
            entries,
            dim,
            fingerprint,
        })
    }
}

pub fn save_index(index: &ShapeIndex, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &index.encode())
}

/// Loads an index. With `expected` set, an index built from a different
/// encoder is refused.
pub fn load_index(path: &Path, expected: Option<Fingerprint>) -> Result<ShapeIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let index = ShapeIndex::decode(&bytes)?;
    if let Some(fp) = expected {
        if fp != index.fingerprint {
            return Err(Error::Fingerprint {
                index: index.fingerprint.to_hex(),
                checkpoint: fp.to_hex(),
            });
        }
    }
    Ok(index)
}
