//! Embedding, exact cosine top-k search, and exemplar formatting.
//!
//! The index is an exact linear scan: the database is small enough that
//! correctness beats speed, and no approximate structure is used. Vectors
//! are stored unnormalized; normalization happens inside the cosine.

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chat::BackendError;
use crate::report::{Corpus, RadiologyReport};

pub const INDEX_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("zero vector: input has no embeddable content")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("database report {0} has no impression; exemplars must carry impressions")]
    MissingImpression(String),
    #[error("index built with embedder {index} but embedder {configured} is configured")]
    EmbedderMismatch { index: String, configured: String },
    #[error("duplicate report id {0} in index")]
    DuplicateId(String),
    #[error("non-finite value in embedding")]
    NonFiniteValue,
    #[error("index file {path}: {reason}")]
    MalformedIndex { path: String, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Fixed-length vector of finite values.
pub type EmbeddingVector = Vec<f64>;

/// Text-to-vector backend with a declared dimension and identity. The
/// identity is persisted with every index so mixed-embedding indices are
/// rejected at load time.
pub trait EmbeddingBackend: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError>;
}

/// Number of retrieved exemplars per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { k: 10 }
    }
}

/// One retrieved exemplar with its cosine similarity to the query.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub report: RadiologyReport,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    vector: EmbeddingVector,
}

/// Immutable id → embedding store over a report database. Built once,
/// safe for unlimited concurrent readers; no mutating API exists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VectorIndex {
    version: u32,
    embedder_id: String,
    dim: usize,
    entries: Vec<IndexEntry>,
    #[serde(skip)]
    reports: Vec<RadiologyReport>,
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    /// Error unless the configured embedder matches the one the index was
    /// built with, in identity and dimension.
    pub fn ensure_matches(&self, embedder: &dyn EmbeddingBackend) -> Result<(), RetrievalError> {
        if self.embedder_id != embedder.id() {
            return Err(RetrievalError::EmbedderMismatch {
                index: self.embedder_id.clone(),
                configured: embedder.id().to_string(),
            });
        }
        if self.dim != embedder.dim() {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: embedder.dim() });
        }
        Ok(())
    }

    /// The database reports, available when the index was built in-process
    /// or re-attached after loading from disk.
    pub fn reports(&self) -> &[RadiologyReport] {
        &self.reports
    }

    /// Re-attach report payloads after loading an index file. Every entry
    /// id must resolve.
    pub fn attach_reports(&mut self, db: &Corpus) -> Result<(), RetrievalError> {
        let mut reports = Vec::with_capacity(self.entries.len());
        for entry in &self.entries {
            let report = db
                .get(&entry.id)
                .ok_or_else(|| RetrievalError::MalformedIndex {
                    path: String::new(),
                    reason: format!("entry {} not found in database corpus", entry.id),
                })?;
            reports.push(report.clone());
        }
        self.reports = reports;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("index serializes");
        fs::write(path, text)
            .map_err(|source| RetrievalError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RetrievalError> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let text = fs::read_to_string(path)
            .map_err(|source| RetrievalError::Io { path: display.clone(), source })?;
        let index: VectorIndex = serde_json::from_str(&text)
            .map_err(|e| RetrievalError::MalformedIndex { path: display.clone(), reason: e.to_string() })?;
        if index.version != INDEX_FORMAT_VERSION {
            return Err(RetrievalError::MalformedIndex {
                path: display,
                reason: format!("unsupported version {}", index.version),
            });
        }
        let mut seen = HashSet::new();
        for entry in &index.entries {
            if entry.vector.len() != index.dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: index.dim,
                    got: entry.vector.len(),
                });
            }
            if !seen.insert(entry.id.as_str()) {
                return Err(RetrievalError::DuplicateId(entry.id.clone()));
            }
        }
        Ok(index)
    }
}

/// The text a report is embedded under: procedure name plus findings.
/// The impression never contributes to retrieval.
pub fn embedding_key(report: &RadiologyReport) -> String {
    format!("PROCEDURE NAME: {}\nFINDINGS: {}", report.procedure_name, report.findings)
}

/// Embed one text, validating the declared dimension and finiteness.
pub fn embed(text: &str, embedder: &dyn EmbeddingBackend) -> Result<EmbeddingVector, RetrievalError> {
    let vector = embedder.embed(text)?;
    if vector.len() != embedder.dim() {
        return Err(RetrievalError::DimensionMismatch { expected: embedder.dim(), got: vector.len() });
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(RetrievalError::NonFiniteValue);
    }
    Ok(vector)
}

/// Cosine similarity, clamped into [-1, 1]. Zero-norm inputs are an
/// error: they signal an unembeddable input, not dissimilarity.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64, RetrievalError> {
    if a.len() != b.len() {
        return Err(RetrievalError::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let mut dot = 0.0;
    let mut norm_a = 0.0;
    let mut norm_b = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        norm_a += x * x;
        norm_b += y * y;
    }
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(RetrievalError::ZeroVector);
    }
    Ok((dot / (norm_a.sqrt() * norm_b.sqrt())).clamp(-1.0, 1.0))
}

/// Embed every database report under its [`embedding_key`] and freeze the
/// result. Every database report must carry an impression.
pub fn build_index(db: &Corpus, embedder: &dyn EmbeddingBackend) -> Result<VectorIndex, RetrievalError> {
    let mut entries = Vec::with_capacity(db.len());
    let mut seen = HashSet::new();
    for report in &db.reports {
        if report.impression.is_none() {
            return Err(RetrievalError::MissingImpression(report.id.clone()));
        }
        if !seen.insert(report.id.as_str()) {
            return Err(RetrievalError::DuplicateId(report.id.clone()));
        }
        let vector = embed(&embedding_key(report), embedder)?;
        entries.push(IndexEntry { id: report.id.clone(), vector });
    }
    Ok(VectorIndex {
        version: INDEX_FORMAT_VERSION,
        embedder_id: embedder.id().to_string(),
        dim: embedder.dim(),
        entries,
        reports: db.reports.clone(),
    })
}

/// Exact top-k by cosine similarity, descending, ties broken by ascending
/// report id. An entry with the query's own id is excluded, so querying a
/// report that is itself in the database never returns itself. Entries
/// whose stored vector has zero norm are skipped with a warning.
pub fn retrieve_top_k(
    index: &VectorIndex,
    query: &RadiologyReport,
    cfg: &RetrievalConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<RetrievalHit>, RetrievalError> {
    if index.is_empty() {
        return Err(RetrievalError::EmptyIndex);
    }
    index.ensure_matches(embedder)?;
    let query_vec = embed(&embedding_key(query), embedder)?;

    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(index.entries.len());
    for (i, entry) in index.entries.iter().enumerate() {
        if entry.id == query.id {
            continue;
        }
        match cosine_similarity(&query_vec, &entry.vector) {
            Ok(score) => scored.push((score, i)),
            Err(RetrievalError::ZeroVector) => {
                log::warn!("skipping index entry {} with zero-norm vector", entry.id);
            }
            Err(e) => return Err(e),
        }
    }
    scored.sort_by(|(sa, ia), (sb, ib)| {
        sb.partial_cmp(sa)
            .expect("scores are finite")
            .then_with(|| index.entries[*ia].id.cmp(&index.entries[*ib].id))
    });
    scored.truncate(cfg.k);

    scored
        .into_iter()
        .map(|(score, i)| {
            let report = index
                .reports
                .get(i)
                .cloned()
                .ok_or_else(|| RetrievalError::MalformedIndex {
                    path: String::new(),
                    reason: "index has no attached reports; call attach_reports after load".into(),
                })?;
            Ok(RetrievalHit { report, score })
        })
        .collect()
}

/// Render hits as the exemplar block handed to the impression writer:
/// a header line, then one numbered section per hit in hit order.
pub fn format_exemplars(hits: &[RetrievalHit]) -> Result<String, RetrievalError> {
    let mut out = String::from("Here are some examples:");
    for (i, hit) in hits.iter().enumerate() {
        let impression = hit
            .report
            .impression
            .as_deref()
            .ok_or_else(|| RetrievalError::MissingImpression(hit.report.id.clone()))?;
        out.push_str(&format!(
            "\nEXAMPLE {}:\nPROCEDURE NAME: {} FINDINGS:\n{}\nIMPRESSION:\n{}",
            i + 1,
            hit.report.procedure_name,
            hit.report.findings,
            impression
        ));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Embedders
// ---------------------------------------------------------------------------

/// FNV-1a, fixed here so hashed embeddings are stable across runs and
/// toolchains.
fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = 0xcbf29ce484222325u64 ^ seed;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub(crate) fn hashed_token_vector(token: &str, dim: usize) -> EmbeddingVector {
    let mut v = vec![0.0; dim];
    for (seed, weight) in [(0u64, 1.0), (1, 0.6), (2, 0.3)] {
        let bucket = (fnv1a(token.as_bytes(), seed) % dim as u64) as usize;
        v[bucket] += weight;
    }
    v
}

/// Deterministic hashed bag-of-words embedder. Offline stand-in for a
/// remote embedding model: same text, same vector, on any machine.
/// Empty input maps to the all-zero vector.
#[derive(Debug, Clone)]
pub struct HashedBowEmbedder {
    dim: usize,
    id: String,
}

impl HashedBowEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, id: format!("hashed-bow-{dim}") }
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl EmbeddingBackend for HashedBowEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let mut v = vec![0.0; self.dim];
        for token in crate::metrics::tokenize(text) {
            for (i, x) in hashed_token_vector(&token, self.dim).iter().enumerate() {
                v[i] += x;
            }
        }
        Ok(v)
    }
}

/// Remote embeddings endpoint (`POST {base}/embeddings`), reading the
/// first data entry.
pub struct RemoteEmbedder {
    client: reqwest::blocking::Client,
    url: String,
    model_id: String,
    token: Option<String>,
    id: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(
        base_url: &str,
        model_id: &str,
        token_env_var: Option<&str>,
        dim: usize,
        timeout_s: u64,
    ) -> Result<Self, RetrievalError> {
        if base_url.is_empty() {
            return Err(BackendError::Config("embedder base_url is empty".into()).into());
        }
        let token = match token_env_var {
            Some(var) => Some(
                std::env::var(var).map_err(|_| BackendError::MissingToken(var.to_string()))?,
            ),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_s))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/embeddings", base_url.trim_end_matches('/')),
            model_id: model_id.to_string(),
            token,
            id: format!("remote-{model_id}-{dim}"),
            dim,
        })
    }
}

#[derive(Deserialize)]
struct WireEmbeddingResponse {
    data: Vec<WireEmbeddingData>,
}

#[derive(Deserialize)]
struct WireEmbeddingData {
    embedding: Vec<f64>,
}

impl EmbeddingBackend for RemoteEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, RetrievalError> {
        let body = serde_json::json!({ "model": self.model_id, "input": text });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status { status, body: text }.into());
        }
        let parsed: WireEmbeddingResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let vector = parsed
            .data
            .into_iter()
            .next()
            .map(|d| d.embedding)
            .ok_or_else(|| BackendError::MalformedResponse("no embedding data".into()))?;
        if vector.len() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: vector.len() });
        }
        Ok(vector)
    }
}
