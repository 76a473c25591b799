//! Uniform access to chat-completion and embedding providers.
//!
//! Backends are registered under string ids and reached through a
//! [`Registry`], which optionally routes every request through a persistent
//! content-addressed [`cache::ResponseCache`]. Scripted mocks and replay
//! transcripts make full pipeline runs deterministic and offline; HTTP
//! providers speak the mainstream chat-completion / embedding JSON wire
//! format.

pub mod cache;
pub mod hash_embed;
pub mod http;
pub mod mock;
pub mod replay;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use cache::ResponseCache;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("unknown backend id \"{0}\"")]
    UnknownBackend(String),
    #[error("provider error ({backend}): {message}")]
    Provider { backend: String, message: String },
    #[error("embedding dimension mismatch ({backend}): declared {declared}, got {got}")]
    DimensionMismatch {
        backend: String,
        declared: usize,
        got: usize,
    },
    #[error("invalid backend descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("scripted backend \"{backend}\": {reason}")]
    ScriptExhausted { backend: String, reason: String },
    #[error("replay backend \"{backend}\": no transcript entry for key {key}")]
    ReplayMiss { backend: String, key: String },
    #[error("chat request has an empty prompt")]
    EmptyPrompt,
    #[error("embed request is empty or contains an empty text")]
    EmptyEmbedText,
    #[error("cache at {path}: {source}")]
    Cache {
        path: String,
        source: std::io::Error,
    },
    #[error("cache at {path}: line {line}: {message}")]
    CacheFormat {
        path: String,
        line: usize,
        message: String,
    },
}

/// A chat-completion request. `temperature` defaults to 0 so batch runs are
/// reproducible unless a caller opts into sampling.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ChatRequest {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> Result<Self, BackendError> {
        let prompt = prompt.into();
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        Ok(ChatRequest {
            system: None,
            prompt,
            temperature: 0.0,
            max_tokens: 1024,
        })
    }
}

/// A batch embedding request; every text must be non-empty.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

impl EmbedRequest {
    pub fn new(texts: Vec<String>) -> Result<Self, BackendError> {
        if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::EmptyEmbedText);
        }
        Ok(EmbedRequest { texts })
    }
}

/// Raw chat provider; the registry layers caching and counting on top.
pub trait ChatProvider: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// Raw embedding provider with a declared output dimension.
pub trait EmbedProvider: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
    fn dimension(&self) -> usize;
}

/// Declarative backend descriptor, as it appears in run config files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackendSpec {
    /// Ordered script or pattern->response rules; see [`mock`].
    ScriptedMock {
        #[serde(default)]
        script: Vec<String>,
        #[serde(default)]
        rules: Vec<mock::ScriptRule>,
        #[serde(default)]
        default: Option<String>,
    },
    /// Serves responses from a recorded transcript file.
    Replay {
        path: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
    },
    /// Chat-completion HTTP endpoint (`POST {model, messages, ...}`).
    HttpChat {
        url: String,
        model: String,
        #[serde(default)]
        auth_env: Option<String>,
        #[serde(default)]
        max_tokens: Option<u32>,
    },
    /// Deterministic pure-function embedder; see [`hash_embed`].
    HashEmbed { dim: usize },
    /// Embedding HTTP endpoint (`POST {model, input}`).
    HttpEmbed {
        url: String,
        model: String,
        dim: usize,
        #[serde(default)]
        auth_env: Option<String>,
    },
}

struct ChatEntry {
    provider: Arc<dyn ChatProvider>,
    provider_calls: Arc<AtomicU64>,
    requests: Arc<AtomicU64>,
}

struct EmbedEntry {
    provider: Arc<dyn EmbedProvider>,
    provider_calls: Arc<AtomicU64>,
    requests: Arc<AtomicU64>,
}

/// Backend registry: id -> provider, with optional shared response cache
/// and per-backend provider-call counters (cache hits do not count).
#[derive(Default)]
pub struct Registry {
    chats: HashMap<String, ChatEntry>,
    embeds: HashMap<String, EmbedEntry>,
    cache: Option<Arc<ResponseCache>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attaches a persistent response cache shared by all backends.
    pub fn attach_cache(&mut self, cache: Arc<ResponseCache>) {
        self.cache = Some(cache);
    }

    pub fn cache(&self) -> Option<&Arc<ResponseCache>> {
        self.cache.as_ref()
    }

    /// Instantiates `spec` and registers it under `id`. Replay backends
    /// register as both chat and embed; other kinds register as one.
    pub fn register(&mut self, id: &str, spec: &BackendSpec) -> Result<(), BackendError> {
        if id.trim().is_empty() {
            return Err(BackendError::InvalidDescriptor(
                "backend id is empty".to_string(),
            ));
        }
        match spec {
            BackendSpec::ScriptedMock {
                script,
                rules,
                default,
            } => {
                let provider =
                    mock::ScriptedChat::from_spec(id, script, rules.clone(), default.clone())?;
                self.insert_chat(id, Arc::new(provider));
            }
            BackendSpec::Replay { path, dim } => {
                let replay = Arc::new(replay::ReplayBackend::load(id, path, *dim)?);
                self.insert_chat(id, replay.clone());
                self.insert_embed(id, replay);
            }
            BackendSpec::HttpChat {
                url,
                model,
                auth_env,
                max_tokens,
            } => {
                let provider = http::HttpChat::new(id, url, model, auth_env.clone(), *max_tokens)?;
                self.insert_chat(id, Arc::new(provider));
            }
            BackendSpec::HashEmbed { dim } => {
                let provider = hash_embed::HashEmbed::new(*dim)?;
                self.insert_embed(id, Arc::new(provider));
            }
            BackendSpec::HttpEmbed {
                url,
                model,
                dim,
                auth_env,
            } => {
                let provider = http::HttpEmbed::new(id, url, model, *dim, auth_env.clone())?;
                self.insert_embed(id, Arc::new(provider));
            }
        }
        Ok(())
    }

    fn insert_chat(&mut self, id: &str, provider: Arc<dyn ChatProvider>) {
        self.chats.insert(
            id.to_string(),
            ChatEntry {
                provider,
                provider_calls: Arc::new(AtomicU64::new(0)),
                requests: Arc::new(AtomicU64::new(0)),
            },
        );
    }

    fn insert_embed(&mut self, id: &str, provider: Arc<dyn EmbedProvider>) {
        self.embeds.insert(
            id.to_string(),
            EmbedEntry {
                provider,
                provider_calls: Arc::new(AtomicU64::new(0)),
                requests: Arc::new(AtomicU64::new(0)),
            },
        );
    }

    /// Sends a chat request through the cache (if attached) to backend `id`.
    pub fn chat(&self, id: &str, req: &ChatRequest) -> Result<String, BackendError> {
        if req.prompt.trim().is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        let entry = self
            .chats
            .get(id)
            .ok_or_else(|| BackendError::UnknownBackend(id.to_string()))?;
        entry.requests.fetch_add(1, Ordering::Relaxed);
        let key = cache::chat_key(id, req);
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(&key) {
                return cache::chat_response_from_value(&v).map_err(|m| BackendError::Provider {
                    backend: id.to_string(),
                    message: m,
                });
            }
        }
        let text = entry.provider.chat(req)?;
        entry.provider_calls.fetch_add(1, Ordering::Relaxed);
        if let Some(cache) = &self.cache {
            cache.put(&key, "chat", id, cache::chat_response_to_value(&text))?;
        }
        Ok(text)
    }

    /// Embeds a batch of texts via backend `id`; output order matches the
    /// input and every vector has the provider's declared dimension.
    pub fn embed(&self, id: &str, req: &EmbedRequest) -> Result<Vec<Vec<f32>>, BackendError> {
        if req.texts.is_empty() || req.texts.iter().any(|t| t.is_empty()) {
            return Err(BackendError::EmptyEmbedText);
        }
        let entry = self
            .embeds
            .get(id)
            .ok_or_else(|| BackendError::UnknownBackend(id.to_string()))?;
        entry.requests.fetch_add(1, Ordering::Relaxed);
        let key = cache::embed_key(id, req);
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(&key) {
                return cache::embed_response_from_value(&v).map_err(|m| {
                    BackendError::Provider {
                        backend: id.to_string(),
                        message: m,
                    }
                });
            }
        }
        let vectors = entry.provider.embed_batch(&req.texts)?;
        entry.provider_calls.fetch_add(1, Ordering::Relaxed);
        if vectors.len() != req.texts.len() {
            return Err(BackendError::Provider {
                backend: id.to_string(),
                message: format!(
                    "provider returned {} vectors for {} texts",
                    vectors.len(),
                    req.texts.len()
                ),
            });
        }
        let declared = entry.provider.dimension();
        for v in &vectors {
            if v.len() != declared {
                return Err(BackendError::DimensionMismatch {
                    backend: id.to_string(),
                    declared,
                    got: v.len(),
                });
            }
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, "embed", id, cache::embed_response_to_value(&vectors))?;
        }
        Ok(vectors)
    }

    /// Declared embedding dimension of backend `id`.
    pub fn embed_dimension(&self, id: &str) -> Result<usize, BackendError> {
        self.embeds
            .get(id)
            .map(|e| e.provider.dimension())
            .ok_or_else(|| BackendError::UnknownBackend(id.to_string()))
    }

    pub fn has_chat(&self, id: &str) -> bool {
        self.chats.contains_key(id)
    }

    pub fn has_embed(&self, id: &str) -> bool {
        self.embeds.contains_key(id)
    }

    /// Requests routed to backend `id`, counted before the cache: cache
    /// hits count here but not in [`Registry::provider_calls`].
    pub fn requests(&self, id: &str) -> u64 {
        let chat = self
            .chats
            .get(id)
            .map(|e| e.requests.load(Ordering::Relaxed))
            .unwrap_or(0);
        let embed = self
            .embeds
            .get(id)
            .map(|e| e.requests.load(Ordering::Relaxed))
            .unwrap_or(0);
        chat + embed
    }

    /// Provider invocations (cache misses) for backend `id`.
    pub fn provider_calls(&self, id: &str) -> u64 {
        let chat = self
            .chats
            .get(id)
            .map(|e| e.provider_calls.load(Ordering::Relaxed))
            .unwrap_or(0);
        let embed = self
            .embeds
            .get(id)
            .map(|e| e.provider_calls.load(Ordering::Relaxed))
            .unwrap_or(0);
        chat + embed
    }

    /// Provider invocations summed over all backends.
    pub fn total_provider_calls(&self) -> u64 {
        let chats: u64 = self
            .chats
            .values()
            .map(|e| e.provider_calls.load(Ordering::Relaxed))
            .sum();
        let embeds: u64 = self
            .embeds
            .values()
            .map(|e| e.provider_calls.load(Ordering::Relaxed))
            .sum();
        chats + embeds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scripted(responses: &[&str]) -> BackendSpec {
        BackendSpec::ScriptedMock {
            script: responses.iter().map(|s| s.to_string()).collect(),
            rules: vec![],
            default: None,
        }
    }

    #[test]
    fn unknown_backend_errors() {
        let reg = Registry::new();
        let req = ChatRequest::new("hello").unwrap();
        assert!(matches!(
            reg.chat("nope", &req),
            Err(BackendError::UnknownBackend(id)) if id == "nope"
        ));
    }

    #[test]
    fn scripted_mock_echoes_script() {
        let mut reg = Registry::new();
        reg.register("m", &scripted(&["first", "second"])).unwrap();
        let req = ChatRequest::new("classify this").unwrap();
        assert_eq!(reg.chat("m", &req).unwrap(), "first");
        assert_eq!(reg.chat("m", &req).unwrap(), "second");
        assert_eq!(reg.provider_calls("m"), 2);
    }

    #[test]
    fn empty_script_exhausts() {
        let mut reg = Registry::new();
        reg.register("m", &scripted(&[])).unwrap();
        let req = ChatRequest::new("x").unwrap();
        assert!(matches!(
            reg.chat("m", &req),
            Err(BackendError::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn embed_batch_matches_one_at_a_time() {
        // derived oracle: batching must equal element-wise single calls
        let mut reg = Registry::new();
        reg.register("e", &BackendSpec::HashEmbed { dim: 64 }).unwrap();
        let texts = vec![
            "患者发热三天".to_string(),
            "antihistamine therapy".to_string(),
            "咳嗽 加重 夜间".to_string(),
        ];
        let batch = reg
            .embed("e", &EmbedRequest::new(texts.clone()).unwrap())
            .unwrap();
        for (i, t) in texts.iter().enumerate() {
            let single = reg
                .embed("e", &EmbedRequest::new(vec![t.clone()]).unwrap())
                .unwrap();
            assert_eq!(batch[i], single[0], "text {i} differs from single-call result");
        }
    }

    #[test]
    fn hash_embed_shape_and_determinism() {
        let mut reg = Registry::new();
        reg.register("e", &BackendSpec::HashEmbed { dim: 64 }).unwrap();
        let req = EmbedRequest::new(vec!["one text".into(), "another".into()]).unwrap();
        let a = reg.embed("e", &req).unwrap();
        let b = reg.embed("e", &req).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|v| v.len() == 64));
    }

    #[test]
    fn empty_embed_request_rejected() {
        assert!(EmbedRequest::new(vec![]).is_err());
        assert!(EmbedRequest::new(vec!["ok".into(), "".into()]).is_err());
    }

    #[test]
    fn invalid_descriptor_rejected() {
        let mut reg = Registry::new();
        let err = reg
            .register("z", &BackendSpec::HashEmbed { dim: 0 })
            .unwrap_err();
        assert!(matches!(err, BackendError::InvalidDescriptor(_)));
        let err = reg
            .register("", &scripted(&["x"]))
            .unwrap_err();
        assert!(matches!(err, BackendError::InvalidDescriptor(_)));
    }
}
