//! Instance-level candidate construction: cosine similarity, exhaustive
//! top-k, and an append-only on-disk embedding cache.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::gateway::{Gateway, GatewayError};
use crate::hash::fnv1a64;
use crate::num::Scalar;

pub use crate::gateway::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("k must be positive")]
    ZeroK,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("similarity with {demo_id:?}: {source}")]
    Candidate {
        demo_id: String,
        #[source]
        source: Box<RetrievalError>,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("cache: {0}")]
    CacheIo(String),
}

/// `dot(u, v) / (|u| |v|)`.
pub fn cosine<T: Scalar>(u: &EmbeddingVector<T>, v: &EmbeddingVector<T>) -> Result<T, RetrievalError> {
    if u.dims() != v.dims() {
        return Err(RetrievalError::DimensionMismatch(u.dims(), v.dims()));
    }
    let (mut dot, mut uu, mut vv) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in u.values().iter().zip(v.values()) {
        dot = dot + a * b;
        uu = uu + a * a;
        vv = vv + b * b;
    }
    if uu == T::zero() || vv == T::zero() {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(dot / (uu.sqrt() * vv.sqrt()))
}

/// Retrieved demonstrations for one test input, most similar first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateSet<T> {
    pub test_id: String,
    pub entries: Vec<(String, T)>,
}

impl<T: Scalar> CandidateSet<T> {
    pub fn demo_ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    pub fn similarity_map(&self) -> BTreeMap<String, T> {
        self.entries.iter().cloned().collect()
    }
}

/// The `k` pool entries most cosine-similar to `query`, by exhaustive scan.
/// Ties go to the smaller demo id.
pub fn top_k<T: Scalar>(
    test_id: &str,
    query: &EmbeddingVector<T>,
    pool: &BTreeMap<String, EmbeddingVector<T>>,
    k: usize,
) -> Result<CandidateSet<T>, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    if pool.is_empty() {
        return Err(RetrievalError::EmptyPool);
    }
    let mut scored = Vec::with_capacity(pool.len());
    for (id, v) in pool {
        let s = cosine(query, v).map_err(|e| RetrievalError::Candidate {
            demo_id: id.clone(),
            source: Box::new(e),
        })?;
        scored.push((id.clone(), s));
    }
    // BTreeMap iteration is id-ascending, so a stable sort on similarity alone
    // leaves equal similarities in ascending id order.
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    scored.truncate(k);
    Ok(CandidateSet {
        test_id: test_id.to_string(),
        entries: scored,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheRecord {
    model: String,
    text_hash: String,
    dims: usize,
    values: Vec<f64>,
}

/// A cache line that failed to load; its entry is recomputed on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheInvalid {
    pub line: usize,
    pub reason: String,
}

type CacheKey = (String, u64);

/// Embeddings keyed by `(model_name, fnv1a64(text))`, persisted as
/// append-only JSON lines `{model, text_hash, dims, values}`.
///
/// Lookups take a read lock; misses are computed under a single writer lock,
/// so each key is embedded at most once for the cache's lifetime.
#[derive(Debug)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<CacheKey, EmbeddingVector<f64>>>,
    writer: Mutex<()>,
    invalid: Vec<CacheInvalid>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(()),
            invalid: Vec::new(),
        }
    }

    /// Opens (or starts) the cache file at `path`. Corrupt lines are skipped
    /// and reported through [`EmbeddingCache::invalid_records`].
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, RetrievalError> {
        let path = path.into();
        let mut entries = HashMap::new();
        let mut invalid = Vec::new();
        match fs::read_to_string(&path) {
            Ok(text) => {
                for (i, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    match parse_cache_line(line) {
                        Ok((key, v)) => {
                            entries.insert(key, v);
                        }
                        Err(reason) => invalid.push(CacheInvalid { line: i + 1, reason }),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(RetrievalError::CacheIo(e.to_string())),
        }
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
            invalid,
        })
    }

    pub fn invalid_records(&self) -> &[CacheInvalid] {
        &self.invalid
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key(model: &str, text: &str) -> CacheKey {
        (model.to_string(), fnv1a64(text))
    }

    fn lookup(&self, model: &str, texts: &[&str]) -> (BTreeMap<String, EmbeddingVector<f64>>, Vec<String>) {
        let entries = self.entries.read().expect("cache lock");
        let mut hits = BTreeMap::new();
        let mut misses = Vec::new();
        for &t in texts {
            match entries.get(&Self::key(model, t)) {
                Some(v) => {
                    hits.insert(t.to_string(), v.clone());
                }
                None => misses.push(t.to_string()),
            }
        }
        (hits, misses)
    }

    /// Embeddings for `texts`, calling the gateway only for keys not yet cached.
    /// Fails on the first text that could not be embedded.
    pub fn get_or_embed(
        &self,
        texts: &[&str],
        gateway: &Gateway,
    ) -> Result<BTreeMap<String, EmbeddingVector<f64>>, RetrievalError> {
        self.get_or_embed_each(texts, gateway)?
            .into_iter()
            .map(|(t, r)| r.map(|v| (t, v)).map_err(RetrievalError::from))
            .collect()
    }

    /// Like [`EmbeddingCache::get_or_embed`] but reports failures per text;
    /// successes are cached even when other texts fail.
    pub fn get_or_embed_each(
        &self,
        texts: &[&str],
        gateway: &Gateway,
    ) -> Result<BTreeMap<String, Result<EmbeddingVector<f64>, GatewayError>>, RetrievalError> {
        let mut uniq: Vec<&str> = texts.to_vec();
        uniq.sort_unstable();
        uniq.dedup();
        let model = gateway.model_name().to_string();
        let (found, misses) = self.lookup(&model, &uniq);
        let mut out: BTreeMap<String, Result<_, _>> = found.into_iter().map(|(t, v)| (t, Ok(v))).collect();
        if misses.is_empty() {
            return Ok(out);
        }

        let _guard = self.writer.lock().expect("cache writer lock");
        // Another writer may have filled some keys while we waited.
        let miss_refs: Vec<&str> = misses.iter().map(String::as_str).collect();
        let (now_found, still_missing) = self.lookup(&model, &miss_refs);
        out.extend(now_found.into_iter().map(|(t, v)| (t, Ok(v))));

        let computed = gateway.embed_many(still_missing.into_iter().map(|t| (t.clone(), t)).collect());
        let mut fresh = Vec::with_capacity(computed.len());
        for (text, res) in computed {
            match res {
                Ok(v) => fresh.push((text, v)),
                Err(e) => {
                    out.insert(text, Err(e));
                }
            }
        }
        if let Some(path) = &self.path {
            append_records(path, &model, &fresh)?;
        }
        let mut entries = self.entries.write().expect("cache lock");
        for (text, v) in fresh {
            entries.insert(Self::key(&model, &text), v.clone());
            out.insert(text, Ok(v));
        }
        Ok(out)
    }
}

fn parse_cache_line(line: &str) -> Result<(CacheKey, EmbeddingVector<f64>), String> {
    let rec: CacheRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let hash = u64::from_str_radix(&rec.text_hash, 16).map_err(|e| format!("text_hash: {e}"))?;
    if rec.dims != rec.values.len() {
        return Err(format!("dims {} but {} values", rec.dims, rec.values.len()));
    }
    let v = EmbeddingVector::new(rec.values).map_err(|e| format!("{e:?}"))?;
    Ok(((rec.model, hash), v))
}

fn append_records(path: &Path, model: &str, fresh: &[(String, EmbeddingVector<f64>)]) -> Result<(), RetrievalError> {
    let io = |e: std::io::Error| RetrievalError::CacheIo(format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let mut buf = String::new();
    for (text, v) in fresh {
        let rec = CacheRecord {
            model: model.to_string(),
            text_hash: format!("{:016x}", fnv1a64(text)),
            dims: v.dims(),
            values: v.values().to_vec(),
        };
        buf.push_str(&serde_json::to_string(&rec).expect("cache record serializes"));
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
    f.write_all(buf.as_bytes()).map_err(io)
}
