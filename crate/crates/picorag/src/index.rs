//! Guideline corpus indexing and exact top-k cosine retrieval.
//!
//! Documents are chunked with sentence-aware overlapping windows, embedded,
//! and persisted to a line-oriented file (header JSON first, then one chunk
//! record per line with a base64 little-endian f32 vector, so round trips
//! are bit-exact). Retrieval is an exact scan: corpora at this scale are
//! small, and exactness is what makes the oracle tests meaningful.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{cache, BackendError, EmbedRequest, Registry};
use crate::types::{EvidenceChunk, MatchedElement, PicoFrame, RetrievalHit, RetrievalMode};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sentence terminators eligible as chunk boundaries.
const SENTENCE_TERMINATORS: [char; 8] = ['。', '．', '.', '!', '?', '！', '？', '\n'];

/// Chunks embedded per provider call during a build.
const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("document \"{0}\" is empty")]
    EmptyDocument(String),
    #[error("duplicate doc_id \"{0}\" in corpus")]
    DuplicateDocId(String),
    #[error("duplicate chunk ({doc_id}, {chunk_id}) in index")]
    DuplicateChunk { doc_id: String, chunk_id: u32 },
    #[error("vector dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("retrieval query is empty")]
    EmptyQuery,
    #[error("index not loaded: {0}")]
    NotLoaded(String),
    #[error("invalid index header: {0}")]
    InvalidHeader(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Index file header: line 1 of the persisted index.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexHeader {
    pub dimension: usize,
    pub metric: String,
    pub embedder_id: String,
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Epoch seconds; 0 under deterministic builds.
    pub built_at: u64,
}

impl IndexHeader {
    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dimension < 1 {
            return Err(IndexError::InvalidHeader("dimension must be >= 1".into()));
        }
        if self.chunk_size < 1 || self.chunk_overlap >= self.chunk_size {
            return Err(IndexError::InvalidHeader(format!(
                "need 0 <= chunk_overlap < chunk_size, got overlap {} size {}",
                self.chunk_overlap, self.chunk_size
            )));
        }
        if self.metric != "cosine" {
            return Err(IndexError::InvalidHeader(format!(
                "unsupported metric \"{}\"",
                self.metric
            )));
        }
        Ok(())
    }
}

/// One corpus document: a JSONL record `{doc_id, title, text}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusDoc {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

/// Splits `text` into overlapping character windows of `chunk_size` with
/// stride `chunk_size - chunk_overlap`. A non-final window's end moves
/// backward to the nearest sentence terminator within the overlap
/// distance when one exists; the final partial window is kept if
/// non-empty. Chunk ids run 0, 1, 2, ...
pub fn chunk_document(
    doc_id: &str,
    text: &str,
    chunk_size: usize,
    chunk_overlap: usize,
) -> Result<Vec<(u32, String)>, IndexError> {
    if text.trim().is_empty() {
        return Err(IndexError::EmptyDocument(doc_id.to_string()));
    }
    if chunk_size < 1 || chunk_overlap >= chunk_size {
        return Err(IndexError::InvalidHeader(format!(
            "need 0 <= chunk_overlap < chunk_size, got overlap {chunk_overlap} size {chunk_size}"
        )));
    }
    let chars: Vec<char> = text.chars().collect();
    let len = chars.len();
    let stride = chunk_size - chunk_overlap;
    let mut chunks = Vec::new();
    let mut start = 0;
    loop {
        let nominal_end = (start + chunk_size).min(len);
        let end = if nominal_end == len {
            len
        } else {
            boundary_adjust(&chars, nominal_end, chunk_overlap, start)
        };
        chunks.push((
            chunks.len() as u32,
            chars[start..end].iter().collect::<String>(),
        ));
        if nominal_end == len {
            break;
        }
        start += stride;
    }
    Ok(chunks)
}

/// Nearest sentence terminator at or after `nominal_end - overlap`,
/// scanning backward from `nominal_end`; fall back to the nominal end.
fn boundary_adjust(chars: &[char], nominal_end: usize, overlap: usize, start: usize) -> usize {
    let floor = nominal_end.saturating_sub(overlap).max(start + 1);
    for p in (floor..nominal_end).rev() {
        if SENTENCE_TERMINATORS.contains(&chars[p]) {
            return p + 1;
        }
    }
    nominal_end
}

/// Cosine similarity with f64 accumulation; errors on dimension mismatch
/// or a zero vector.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (f64::from(*x), f64::from(*y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// What drives a retrieval: a PICO frame or plain query text.
#[derive(Debug, Clone, Copy)]
pub enum RetrievalInput<'a> {
    Frame(&'a PicoFrame),
    Text(&'a str),
}

/// An immutable, fully loaded vector index.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    header: IndexHeader,
    chunks: Vec<EvidenceChunk>,
}

impl VectorIndex {
    pub fn new(header: IndexHeader, chunks: Vec<EvidenceChunk>) -> Result<Self, IndexError> {
        header.validate()?;
        let mut seen = HashSet::new();
        for c in &chunks {
            if c.embedding.len() != header.dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: header.dimension,
                    got: c.embedding.len(),
                });
            }
            if !seen.insert((c.doc_id.clone(), c.chunk_id)) {
                return Err(IndexError::DuplicateChunk {
                    doc_id: c.doc_id.clone(),
                    chunk_id: c.chunk_id,
                });
            }
        }
        Ok(VectorIndex { header, chunks })
    }

    pub fn header(&self) -> &IndexHeader {
        &self.header
    }

    pub fn chunks(&self) -> &[EvidenceChunk] {
        &self.chunks
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn contains(&self, doc_id: &str, chunk_id: u32) -> bool {
        self.chunks
            .iter()
            .any(|c| c.doc_id == doc_id && c.chunk_id == chunk_id)
    }

    /// Top-k retrieval. `per_element_max` embeds each present PICO field
    /// and scores a chunk by its best field; `concatenated` embeds one
    /// joined string. Plain-text input always uses the concatenated path.
    pub fn retrieve(
        &self,
        input: RetrievalInput<'_>,
        k: usize,
        mode: RetrievalMode,
        registry: &Registry,
        embedder_id: &str,
    ) -> Result<Vec<RetrievalHit>, IndexError> {
        if k < 1 {
            return Err(IndexError::EmptyQuery);
        }
        let queries: Vec<(MatchedElement, String)> = match input {
            RetrievalInput::Frame(frame) => match mode {
                RetrievalMode::PerElementMax => frame
                    .present_fields()
                    .into_iter()
                    .map(|(e, v)| (e, v.to_string()))
                    .collect(),
                RetrievalMode::Concatenated => {
                    let joined = frame.concatenated();
                    if joined.is_empty() {
                        vec![]
                    } else {
                        vec![(MatchedElement::Query, joined)]
                    }
                }
            },
            RetrievalInput::Text(t) => {
                let t = t.trim();
                if t.is_empty() {
                    vec![]
                } else {
                    vec![(MatchedElement::Query, t.to_string())]
                }
            }
        };
        if queries.is_empty() {
            return Err(IndexError::EmptyQuery);
        }
        let texts: Vec<String> = queries.iter().map(|(_, t)| t.clone()).collect();
        let vectors = registry.embed(embedder_id, &EmbedRequest::new(texts)?)?;
        let embedded: Vec<(MatchedElement, Vec<f32>)> = queries
            .into_iter()
            .zip(vectors)
            .map(|((e, _), v)| (e, v))
            .collect();
        for (_, v) in &embedded {
            if v.len() != self.header.dimension {
                return Err(IndexError::DimensionMismatch {
                    expected: self.header.dimension,
                    got: v.len(),
                });
            }
        }
        #[cfg(feature = "parallel")]
        let scored = score_chunks_par(&self.chunks, &embedded)?;
        #[cfg(not(feature = "parallel"))]
        let scored = score_chunks_seq(&self.chunks, &embedded)?;
        Ok(select_top_k(&self.chunks, scored, k))
    }
}

/// Scores one chunk against every query vector: best cosine wins and ties
/// resolve to the earliest query element (P, I, C, O order).
fn score_one(
    chunk: &EvidenceChunk,
    queries: &[(MatchedElement, Vec<f32>)],
) -> Result<(f64, MatchedElement), IndexError> {
    let mut best: Option<(f64, MatchedElement)> = None;
    for (element, qv) in queries {
        let s = cosine(qv, &chunk.embedding)?;
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, *element));
        }
    }
    best.ok_or(IndexError::EmptyQuery)
}

/// Sequential chunk scoring; the fallback when the `parallel` feature is
/// off, kept callable for benchmarks either way.
pub fn score_chunks_seq(
    chunks: &[EvidenceChunk],
    queries: &[(MatchedElement, Vec<f32>)],
) -> Result<Vec<(f64, MatchedElement)>, IndexError> {
    chunks.iter().map(|c| score_one(c, queries)).collect()
}

/// Data-parallel chunk scoring over the rayon pool. Output order matches
/// the chunk order exactly, so results are identical to the sequential
/// path.
#[cfg(feature = "parallel")]
pub fn score_chunks_par(
    chunks: &[EvidenceChunk],
    queries: &[(MatchedElement, Vec<f32>)],
) -> Result<Vec<(f64, MatchedElement)>, IndexError> {
    chunks.par_iter().map(|c| score_one(c, queries)).collect()
}

/// Sorts by score descending, ties by (doc_id, chunk_id) ascending, and
/// keeps the first k.
fn select_top_k(
    chunks: &[EvidenceChunk],
    scored: Vec<(f64, MatchedElement)>,
    k: usize,
) -> Vec<RetrievalHit> {
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .0
            .total_cmp(&scored[a].0)
            .then_with(|| chunks[a].doc_id.cmp(&chunks[b].doc_id))
            .then_with(|| chunks[a].chunk_id.cmp(&chunks[b].chunk_id))
    });
    order
        .into_iter()
        .take(k)
        .map(|i| RetrievalHit {
            doc_id: chunks[i].doc_id.clone(),
            chunk_id: chunks[i].chunk_id,
            text: chunks[i].text.clone(),
            score: scored[i].0,
            matched_element: scored[i].1,
        })
        .collect()
}

/// Build parameters for [`build_index`].
#[derive(Debug, Clone)]
pub struct BuildParams {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    /// Write `built_at = 0` so rebuilds are byte-identical.
    pub deterministic: bool,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            chunk_size: 500,
            chunk_overlap: 50,
            deterministic: false,
        }
    }
}

/// Chunks and embeds a corpus into an immutable index.
pub fn build_index(
    docs: impl IntoIterator<Item = Result<CorpusDoc, IndexError>>,
    registry: &Registry,
    embedder_id: &str,
    params: &BuildParams,
) -> Result<VectorIndex, IndexError> {
    let dimension = registry.embed_dimension(embedder_id)?;
    let header = IndexHeader {
        dimension,
        metric: "cosine".to_string(),
        embedder_id: embedder_id.to_string(),
        chunk_size: params.chunk_size,
        chunk_overlap: params.chunk_overlap,
        built_at: if params.deterministic {
            0
        } else {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        },
    };
    header.validate()?;
    let mut seen_docs = HashSet::new();
    let mut pending: Vec<(String, u32, String)> = Vec::new();
    for doc in docs {
        let doc = doc?;
        if !seen_docs.insert(doc.doc_id.clone()) {
            return Err(IndexError::DuplicateDocId(doc.doc_id));
        }
        for (chunk_id, text) in
            chunk_document(&doc.doc_id, &doc.text, params.chunk_size, params.chunk_overlap)?
        {
            pending.push((doc.doc_id.clone(), chunk_id, text));
        }
    }
    let mut chunks = Vec::with_capacity(pending.len());
    for batch in pending.chunks(EMBED_BATCH) {
        let texts: Vec<String> = batch.iter().map(|(_, _, t)| t.clone()).collect();
        let vectors = registry.embed(embedder_id, &EmbedRequest::new(texts)?)?;
        for ((doc_id, chunk_id, text), embedding) in batch.iter().zip(vectors) {
            chunks.push(EvidenceChunk {
                doc_id: doc_id.clone(),
                chunk_id: *chunk_id,
                text: text.clone(),
                embedding,
            });
        }
    }
    VectorIndex::new(header, chunks)
}

/// Reads a `{doc_id, title, text}` JSONL corpus file.
pub fn read_corpus(path: &Path) -> Result<Vec<Result<CorpusDoc, IndexError>>, IndexError> {
    let file = File::open(path).map_err(|source| IndexError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IndexError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(
            serde_json::from_str::<CorpusDoc>(&line).map_err(|e| IndexError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            }),
        );
    }
    Ok(docs)
}

#[derive(Serialize, Deserialize)]
struct ChunkRecord {
    doc_id: String,
    chunk_id: u32,
    text: String,
    vec_b64: String,
}

impl VectorIndex {
    /// Writes the index: line 1 is the header JSON, the rest are chunk
    /// records with base64 little-endian f32 vectors.
    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        let mut line = serde_json::to_string(&self.header).expect("header serializes");
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_err)?;
        for c in &self.chunks {
            let rec = ChunkRecord {
                doc_id: c.doc_id.clone(),
                chunk_id: c.chunk_id,
                text: c.text.clone(),
                vec_b64: cache::encode_vector(&c.embedding),
            };
            let mut line = serde_json::to_string(&rec).expect("chunk record serializes");
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let io_err = |source| IndexError::Io {
            path: path.display().to_string(),
            source,
        };
        if !path.exists() {
            return Err(IndexError::NotLoaded(path.display().to_string()));
        }
        let mut lines = BufReader::new(File::open(path).map_err(io_err)?).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| IndexError::InvalidHeader("index file is empty".into()))?
            .map_err(io_err)?;
        let header: IndexHeader =
            serde_json::from_str(&header_line).map_err(|e| IndexError::Format {
                path: path.display().to_string(),
                line: 1,
                message: e.to_string(),
            })?;
        let mut chunks = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ChunkRecord =
                serde_json::from_str(&line).map_err(|e| IndexError::Format {
                    path: path.display().to_string(),
                    line: i + 2,
                    message: e.to_string(),
                })?;
            let embedding = cache::decode_vector(&rec.vec_b64).map_err(|m| IndexError::Format {
                path: path.display().to_string(),
                line: i + 2,
                message: m,
            })?;
            chunks.push(EvidenceChunk {
                doc_id: rec.doc_id,
                chunk_id: rec.chunk_id,
                text: rec.text,
                embedding,
            });
        }
        VectorIndex::new(header, chunks)
    }
}
