//! On-disk dataset cache. Only observed rows are stored; padding is rebuilt
//! on load with zero features and a `1 / len` placeholder elapsed time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{IrregularSequence, Label, Task};
use crate::blob;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const FORMAT_VERSION: u32 = 1;

/// Identifies a generated corpus: the generator, its parameters, and seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub task: Task,
    pub params: BTreeMap<String, String>,
    pub seed: u64,
}

impl CacheKey {
    pub fn new(task: Task, seed: u64) -> Self {
        CacheKey {
            task,
            params: BTreeMap::new(),
            seed,
        }
    }

    pub fn with(mut self, name: &str, value: impl ToString) -> Self {
        self.params.insert(name.to_string(), value.to_string());
        self
    }

    /// Stable file name, e.g. `xor_dense-bits=16-count=100-split=train-seed=7.bin`.
    pub fn file_name(&self) -> String {
        let mut name = self.task.name().to_string();
        for (k, v) in &self.params {
            name.push_str(&format!("-{k}={v}"));
        }
        format!("{name}-seed={}.bin", self.seed)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SeqMeta {
    len: usize,
    valid_len: usize,
    label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    key: CacheKey,
    dim: usize,
    sequences: Vec<SeqMeta>,
    sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Created,
    Verified,
}

fn flatten(data: &[IrregularSequence]) -> Result<(usize, Vec<SeqMeta>, Vec<f64>)> {
    let dim = data.first().map_or(1, |s| s.dim());
    let mut meta = Vec::with_capacity(data.len());
    let mut payload = Vec::new();
    for s in data {
        if s.dim() != dim {
            return Err(Error::dim("cache", format!("feature width {} vs {dim}", s.dim())));
        }
        payload.extend_from_slice(&s.features.data()[..s.valid_len * dim]);
        payload.extend_from_slice(&s.elapsed[..s.valid_len]);
        meta.push(SeqMeta {
            len: s.len(),
            valid_len: s.valid_len,
            label: s.label.clone(),
        });
    }
    Ok((dim, meta, payload))
}

fn digest(key: &CacheKey, dim: usize, meta: &[SeqMeta], payload: &[f64]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&(key, dim, meta))?);
    for v in payload {
        h.update(v.to_le_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Writes `data` under `key`. If `path` already exists its stored hash must
/// equal the hash of `data`, in which case nothing is written.
pub fn write_cache(path: &Path, key: &CacheKey, data: &[IrregularSequence]) -> Result<CacheStatus> {
    let (dim, sequences, payload) = flatten(data)?;
    let sha256 = digest(key, dim, &sequences, &payload)?;
    if path.exists() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        // Hash what is actually stored, not the hash the header claims.
        let found = blob::decode::<Header>(path, &bytes)
            .ok()
            .and_then(|(h, p)| digest(&h.key, h.dim, &h.sequences, &p).ok())
            .unwrap_or_else(|| "unreadable".into());
        return if found == sha256 {
            Ok(CacheStatus::Verified)
        } else {
            Err(Error::CacheConflict {
                path: path.to_path_buf(),
                expected: sha256,
                found,
            })
        };
    }
    let header = Header {
        version: FORMAT_VERSION,
        key: key.clone(),
        dim,
        sequences,
        sha256,
    };
    blob::write(path, &header, &payload)?;
    Ok(CacheStatus::Created)
}

/// Loads a cache and checks its integrity hash.
pub fn read_cache(path: &Path) -> Result<(CacheKey, Vec<IrregularSequence>)> {
    let (header, payload): (Header, Vec<f64>) = blob::read(path)?;
    let fail = |detail: String| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail,
    };
    if header.version != FORMAT_VERSION {
        return Err(fail(format!("unsupported cache version {}", header.version)));
    }
    let sum = digest(&header.key, header.dim, &header.sequences, &payload)?;
    if sum != header.sha256 {
        return Err(fail(format!(
            "content hash {sum} does not match header {}",
            header.sha256
        )));
    }
    let dim = header.dim;
    let mut pos = 0;
    let mut out = Vec::with_capacity(header.sequences.len());
    for m in header.sequences {
        let n = m.valid_len;
        let mut features = payload[pos..pos + n * dim].to_vec();
        features.resize(m.len * dim, 0.0);
        pos += n * dim;
        let mut elapsed = payload[pos..pos + n].to_vec();
        elapsed.resize(m.len, 1.0 / m.len as f64);
        pos += n;
        out.push(IrregularSequence::new(
            Tensor::from_vec(m.len, dim, features)?,
            elapsed,
            m.label,
            n,
        )?);
    }
    Ok((header.key, out))
}

/// `root/<key file name>`.
pub fn cache_path(root: &Path, key: &CacheKey) -> PathBuf {
    root.join(key.file_name())
}
