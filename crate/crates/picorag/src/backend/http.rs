//! HTTP chat and embedding providers, wire-compatible with mainstream
//! chat-completion and embedding JSON APIs.
//!
//! Transport failures and 5xx responses are retried up to 3 attempts with
//! exponential backoff; 4xx responses fail immediately so prompt bugs are
//! not masked. Auth tokens come from an environment variable named in the
//! descriptor, never from the command line.

use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatProvider, ChatRequest, EmbedProvider};

const MAX_ATTEMPTS: u32 = 3;
const BACKOFF_BASE_MS: u64 = 200;

fn provider_err(backend: &str, message: impl Into<String>) -> BackendError {
    BackendError::Provider {
        backend: backend.to_string(),
        message: message.into(),
    }
}

fn auth_header(backend: &str, auth_env: &Option<String>) -> Result<Option<String>, BackendError> {
    match auth_env {
        None => Ok(None),
        Some(var) => {
            let token = std::env::var(var).map_err(|_| {
                provider_err(backend, format!("auth env var {var} is not set"))
            })?;
            Ok(Some(format!("Bearer {token}")))
        }
    }
}

/// POSTs `body` to `url`, retrying transient failures. Returns the parsed
/// JSON response.
fn post_with_retry(
    backend: &str,
    url: &str,
    auth: &Option<String>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut last_err = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        if attempt > 0 {
            std::thread::sleep(Duration::from_millis(BACKOFF_BASE_MS << (attempt - 1)));
        }
        let mut req = ureq::post(url);
        if let Some(auth) = auth {
            req = req.header("Authorization", auth);
        }
        match req.send_json(body) {
            Ok(mut resp) => {
                return resp
                    .body_mut()
                    .read_json::<Value>()
                    .map_err(|e| provider_err(backend, format!("bad JSON response: {e}")));
            }
            Err(ureq::Error::StatusCode(code)) if (400..500).contains(&code) => {
                return Err(provider_err(backend, format!("HTTP {code}")));
            }
            Err(e) => {
                last_err = e.to_string();
            }
        }
    }
    Err(provider_err(
        backend,
        format!("gave up after {MAX_ATTEMPTS} attempts: {last_err}"),
    ))
}

pub struct HttpChat {
    id: String,
    url: String,
    model: String,
    auth_env: Option<String>,
    max_tokens: Option<u32>,
}

impl HttpChat {
    pub fn new(
        id: &str,
        url: &str,
        model: &str,
        auth_env: Option<String>,
        max_tokens: Option<u32>,
    ) -> Result<Self, BackendError> {
        if url.trim().is_empty() || model.trim().is_empty() {
            return Err(BackendError::InvalidDescriptor(format!(
                "http-chat \"{id}\" needs a url and a model"
            )));
        }
        Ok(HttpChat {
            id: id.to_string(),
            url: url.to_string(),
            model: model.to_string(),
            auth_env,
            max_tokens,
        })
    }
}

impl ChatProvider for HttpChat {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut messages = Vec::new();
        if let Some(system) = &req.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": req.prompt}));
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": self.max_tokens.unwrap_or(req.max_tokens),
        });
        let auth = auth_header(&self.id, &self.auth_env)?;
        let resp = post_with_retry(&self.id, &self.url, &auth, &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| provider_err(&self.id, "response lacks choices[0].message.content"))
    }
}

pub struct HttpEmbed {
    id: String,
    url: String,
    model: String,
    dim: usize,
    auth_env: Option<String>,
}

impl HttpEmbed {
    pub fn new(
        id: &str,
        url: &str,
        model: &str,
        dim: usize,
        auth_env: Option<String>,
    ) -> Result<Self, BackendError> {
        if url.trim().is_empty() || model.trim().is_empty() || dim == 0 {
            return Err(BackendError::InvalidDescriptor(format!(
                "http-embed \"{id}\" needs a url, a model, and dim >= 1"
            )));
        }
        Ok(HttpEmbed {
            id: id.to_string(),
            url: url.to_string(),
            model: model.to_string(),
            dim,
            auth_env,
        })
    }
}

impl EmbedProvider for HttpEmbed {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let body = json!({"model": self.model, "input": texts});
        let auth = auth_header(&self.id, &self.auth_env)?;
        let resp = post_with_retry(&self.id, &self.url, &auth, &body)?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| provider_err(&self.id, "response lacks a data array"))?;
        let mut vectors = Vec::with_capacity(data.len());
        for item in data {
            let emb = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| provider_err(&self.id, "data item lacks an embedding"))?;
            let v: Vec<f32> = emb
                .iter()
                .map(|x| x.as_f64().unwrap_or(f64::NAN) as f32)
                .collect();
            if v.len() != self.dim {
                return Err(BackendError::DimensionMismatch {
                    backend: self.id.clone(),
                    declared: self.dim,
                    got: v.len(),
                });
            }
            vectors.push(v);
        }
        Ok(vectors)
    }

    fn dimension(&self) -> usize {
        self.dim
    }
}
