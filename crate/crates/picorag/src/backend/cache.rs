//! Persistent content-addressed response cache.
//!
//! The cache file is append-only, one JSON record per line:
//! `{"key": hex, "kind": "chat"|"embed", "backend": id, "response": ...}`.
//! On load, last write wins per key, so a crash mid-append costs at most
//! the trailing partial line. Replay transcripts use the same format.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatRequest, EmbedRequest};

/// One cache record as it appears on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub kind: String,
    pub backend: String,
    pub response: Value,
}

/// In-memory entry; `created_at` is epoch seconds at insert or load time
/// and never serialized.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub response: Value,
    pub created_at: u64,
}

fn now_epoch() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Canonical cache key: SHA-256 over `{backend, kind, request}` serialized
/// with sorted field names, hex-encoded. A pure function of backend id and
/// request, stable across field-order differences.
fn request_key(backend: &str, kind: &str, request_body: Value) -> String {
    // serde_json::Map is a BTreeMap: object keys serialize sorted.
    let canonical = serde_json::json!({
        "backend": backend,
        "kind": kind,
        "request": request_body,
    });
    let mut hasher = Sha256::new();
    hasher.update(canonical.to_string().as_bytes());
    hex_encode(&hasher.finalize())
}

fn hex_encode(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

pub fn chat_key(backend: &str, req: &ChatRequest) -> String {
    request_key(
        backend,
        "chat",
        serde_json::to_value(req).expect("chat request serializes"),
    )
}

pub fn embed_key(backend: &str, req: &EmbedRequest) -> String {
    request_key(
        backend,
        "embed",
        serde_json::to_value(req).expect("embed request serializes"),
    )
}

pub fn chat_response_to_value(text: &str) -> Value {
    Value::String(text.to_string())
}

pub fn chat_response_from_value(v: &Value) -> Result<String, String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| "cached chat response is not a string".to_string())
}

/// Embeddings are stored as base64 little-endian f32 so the round trip is
/// bit-exact.
pub fn embed_response_to_value(vectors: &[Vec<f32>]) -> Value {
    let encoded: Vec<Value> = vectors
        .iter()
        .map(|v| Value::String(encode_vector(v)))
        .collect();
    serde_json::json!({ "vectors_b64": encoded })
}

pub fn embed_response_from_value(v: &Value) -> Result<Vec<Vec<f32>>, String> {
    let arr = v
        .get("vectors_b64")
        .and_then(Value::as_array)
        .ok_or_else(|| "cached embed response lacks vectors_b64".to_string())?;
    arr.iter()
        .map(|e| {
            e.as_str()
                .ok_or_else(|| "vectors_b64 entry is not a string".to_string())
                .and_then(decode_vector)
        })
        .collect()
}

pub fn encode_vector(v: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_vector(s: &str) -> Result<Vec<f32>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    if bytes.len() % 4 != 0 {
        return Err(format!("vector byte length {} not a multiple of 4", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Append-only response cache with concurrent readers and appenders.
/// Appends are atomic at record granularity (one `write_all` per record).
pub struct ResponseCache {
    path: PathBuf,
    entries: RwLock<HashMap<String, CacheEntry>>,
    file: Mutex<File>,
    hits: AtomicU64,
}

impl ResponseCache {
    /// Opens (or creates) the cache file and loads existing records;
    /// last write wins per key. A trailing partial line is ignored.
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        let io_err = |source| BackendError::Cache {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(io_err)?;
            }
        }
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path).map_err(io_err)?);
            let loaded_at = now_epoch();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(&line) {
                    Ok(rec) => {
                        entries.insert(
                            rec.key,
                            CacheEntry {
                                response: rec.response,
                                created_at: loaded_at,
                            },
                        );
                    }
                    Err(e) => {
                        // a torn final line is expected after a crash
                        if i + 1 == count_lines(path).unwrap_or(usize::MAX) {
                            continue;
                        }
                        return Err(BackendError::CacheFormat {
                            path: path.display().to_string(),
                            line: i + 1,
                            message: e.to_string(),
                        });
                    }
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        Ok(ResponseCache {
            path: path.to_path_buf(),
            entries: RwLock::new(entries),
            file: Mutex::new(file),
            hits: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<Value> {
        let found = self
            .entries
            .read()
            .expect("cache lock")
            .get(key)
            .map(|e| e.response.clone());
        if found.is_some() {
            self.hits.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    pub fn put(
        &self,
        key: &str,
        kind: &str,
        backend: &str,
        response: Value,
    ) -> Result<(), BackendError> {
        let record = CacheRecord {
            key: key.to_string(),
            kind: kind.to_string(),
            backend: backend.to_string(),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&record).expect("cache record serializes");
        line.push('\n');
        {
            let mut file = self.file.lock().expect("cache file lock");
            file.write_all(line.as_bytes()).map_err(|source| BackendError::Cache {
                path: self.path.display().to_string(),
                source,
            })?;
            file.flush().map_err(|source| BackendError::Cache {
                path: self.path.display().to_string(),
                source,
            })?;
        }
        self.entries.write().expect("cache lock").insert(
            key.to_string(),
            CacheEntry {
                response,
                created_at: now_epoch(),
            },
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }
}

fn count_lines(path: &Path) -> std::io::Result<usize> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BackendSpec, Registry};

    #[test]
    fn key_is_stable_and_request_sensitive() {
        let a = ChatRequest::new("prompt one").unwrap();
        let b = ChatRequest::new("prompt one").unwrap();
        let c = ChatRequest::new("prompt two").unwrap();
        assert_eq!(chat_key("m", &a), chat_key("m", &b));
        assert_ne!(chat_key("m", &a), chat_key("m", &c));
        assert_ne!(chat_key("m", &a), chat_key("other", &a));
    }

    #[test]
    fn vector_encoding_round_trips_bit_exact() {
        let v = vec![0.0f32, -1.5, 3.25e-7, f32::MIN_POSITIVE, 1e30];
        let decoded = decode_vector(&encode_vector(&v)).unwrap();
        assert_eq!(v, decoded);
    }

    #[test]
    fn cache_hit_skips_provider() {
        let dir = tempfile::tempdir().unwrap();
        let cache = std::sync::Arc::new(ResponseCache::open(&dir.path().join("c.jsonl")).unwrap());
        let mut reg = Registry::new();
        reg.register(
            "m",
            &BackendSpec::ScriptedMock {
                script: vec![],
                rules: vec![mock_rule("", "scripted reply")],
                default: None,
            },
        )
        .unwrap();
        reg.attach_cache(cache);
        let req = ChatRequest::new("the same request").unwrap();
        assert_eq!(reg.chat("m", &req).unwrap(), "scripted reply");
        assert_eq!(reg.chat("m", &req).unwrap(), "scripted reply");
        assert_eq!(reg.provider_calls("m"), 1, "second call must be a cache hit");
    }

    #[test]
    fn cache_persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache
                .put("k1", "chat", "m", Value::String("hello".into()))
                .unwrap();
            cache
                .put("k1", "chat", "m", Value::String("overwritten".into()))
                .unwrap();
        }
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get("k1"), Some(Value::String("overwritten".into())));
    }

    fn mock_rule(contains: &str, response: &str) -> crate::backend::mock::ScriptRule {
        crate::backend::mock::ScriptRule {
            contains: crate::backend::mock::OneOrMany::One(contains.to_string()),
            response: response.to_string(),
        }
    }
}
