//! Replay backend: serves chat and embed responses from a recorded
//! transcript, for offline reruns of previously executed batches.
//!
//! A transcript is a cache file (see [`super::cache`]) produced by running
//! with `--record`. Keys are content-addressed, so the replay backend must
//! be registered under the same id as the backend that produced the
//! transcript.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde_json::Value;

use super::cache::{self, CacheRecord};
use super::{BackendError, ChatProvider, ChatRequest, EmbedProvider};

pub struct ReplayBackend {
    id: String,
    entries: HashMap<String, Value>,
    dim: usize,
}

impl ReplayBackend {
    pub fn load(id: &str, path: &Path, dim: Option<usize>) -> Result<Self, BackendError> {
        let io_err = |source| BackendError::Cache {
            path: path.display().to_string(),
            source,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut entries = HashMap::new();
        let mut inferred_dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord =
                serde_json::from_str(&line).map_err(|e| BackendError::CacheFormat {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if rec.kind == "embed" && inferred_dim.is_none() {
                if let Ok(vectors) = cache::embed_response_from_value(&rec.response) {
                    inferred_dim = vectors.first().map(Vec::len);
                }
            }
            entries.insert(rec.key, rec.response);
        }
        Ok(ReplayBackend {
            id: id.to_string(),
            entries,
            dim: dim.or(inferred_dim).unwrap_or(0),
        })
    }

    fn lookup(&self, key: &str) -> Result<&Value, BackendError> {
        self.entries.get(key).ok_or_else(|| BackendError::ReplayMiss {
            backend: self.id.clone(),
            key: key.to_string(),
        })
    }
}

impl ChatProvider for ReplayBackend {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let key = cache::chat_key(&self.id, req);
        let v = self.lookup(&key)?;
        cache::chat_response_from_value(v).map_err(|m| BackendError::Provider {
            backend: self.id.clone(),
            message: m,
        })
    }
}

impl EmbedProvider for ReplayBackend {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let req = super::EmbedRequest {
            texts: texts.to_vec(),
        };
        let key = cache::embed_key(&self.id, &req);
        let v = self.lookup(&key)?;
        cache::embed_response_from_value(v).map_err(|m| BackendError::Provider {
            backend: self.id.clone(),
            message: m,
        })
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}
