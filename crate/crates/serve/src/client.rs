//! Blocking client for embedding services speaking the `/v1/embeddings` shape.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use stagerank_core::biencoder::{Embedder, TextRole};
use stagerank_core::error::{Error, Result};
use stagerank_core::scalar::normalize_in_place;
use ureq::Agent;

use crate::api::{EmbeddingInput, EmbeddingRequest, EmbeddingResponse};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEmbedderConfig {
    pub base_url: String,
    #[serde(default)]
    pub model_name: String,
    /// Environment variable holding the API key, sent as a bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: usize,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_batch() -> usize {
    64
}
fn default_timeout() -> f64 {
    30.0
}
fn default_retries() -> usize {
    3
}
fn default_backoff() -> u64 {
    100
}
fn default_in_flight() -> usize {
    4
}

impl RemoteEmbedderConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: String::new(),
            api_key_env: None,
            batch_size: default_batch(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_in_flight == 0 {
            return Err(Error::Config("remote embedder batch_size and max_in_flight must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("remote embedder timeout must be positive".into()));
        }
        Ok(())
    }
}

pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    agent: Agent,
    api_key: Option<String>,
    dim: OnceLock<usize>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for RemoteEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEmbedder").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

enum Failure {
    Retryable(String),
    Fatal(String),
}

impl RemoteEmbedder {
    pub fn new(cfg: RemoteEmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| Error::Config(format!("environment variable {var} is not set")))?),
            None => None,
        };
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { cfg, agent, api_key, dim: OnceLock::new(), requests: AtomicUsize::new(0) })
    }

    /// HTTP requests issued so far, retries included.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::Relaxed)
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/embeddings", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, body: &EmbeddingRequest) -> std::result::Result<EmbeddingResponse, Failure> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let mut req = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if status != 200 {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(Failure::Fatal(format!("HTTP {status}: {text}")));
        }
        resp.body_mut()
            .read_json::<EmbeddingResponse>()
            .map_err(|e| Failure::Fatal(format!("invalid response body: {e}")))
    }

    fn embed_chunk(&self, texts: &[&str], role: TextRole) -> Result<Vec<Vec<f32>>> {
        let body = EmbeddingRequest {
            model: self.cfg.model_name.clone(),
            input: EmbeddingInput::Many(texts.iter().map(|t| t.to_string()).collect()),
            input_type: Some(match role {
                TextRole::Query => "query".into(),
                TextRole::Passage => "passage".into(),
            }),
        };
        let mut attempts = 0;
        let response = loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(r) => break r,
                Err(Failure::Fatal(message)) => return Err(Error::Remote { attempts, message }),
                Err(Failure::Retryable(message)) => {
                    if attempts > self.cfg.max_retries {
                        return Err(Error::Remote { attempts, message });
                    }
                    log::warn!("embedding request failed ({message}), retry {attempts}/{}", self.cfg.max_retries);
                    thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (attempts - 1).min(16)));
                }
            }
        };
        let mut slots: Vec<Option<Vec<f32>>> = vec![None; texts.len()];
        for d in response.data {
            let slot = slots
                .get_mut(d.index)
                .ok_or_else(|| Error::Format(format!("response index {} out of range", d.index)))?;
            *slot = Some(d.embedding);
        }
        let mut out = Vec::with_capacity(texts.len());
        for (i, v) in slots.into_iter().enumerate() {
            let mut v = v.ok_or_else(|| Error::Format(format!("response is missing input {i}")))?;
            if let Some(first) = out.first().map(Vec::len) {
                if v.len() != first {
                    return Err(Error::Shape(format!("embedding {i} has dimension {}, expected {first}", v.len())));
                }
            }
            normalize_in_place(&mut v);
            out.push(v);
        }
        Ok(out)
    }
}

impl Embedder for RemoteEmbedder {
    /// Order-preserving; at most `max_in_flight` chunk requests run at once.
    fn embed_texts(&self, texts: &[&str], role: TextRole) -> Result<Vec<Vec<f32>>> {
        let chunks: Vec<&[&str]> = texts.chunks(self.cfg.batch_size).collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in chunks.chunks(self.cfg.max_in_flight) {
            let results: Vec<Result<Vec<Vec<f32>>>> = thread::scope(|s| {
                let handles: Vec<_> = wave.iter().map(|c| s.spawn(move || self.embed_chunk(c, role))).collect();
                handles.into_iter().map(|h| h.join().expect("embedding worker panicked")).collect()
            });
            for r in results {
                let vectors = r?;
                out.extend(vectors);
            }
        }
        if let Some(d) = out.first().map(Vec::len) {
            if out.iter().any(|v| v.len() != d) {
                return Err(Error::Shape("remote embeddings differ in dimension across batches".into()));
            }
            let _ = self.dim.set(d);
        }
        Ok(out)
    }

    /// Known after the first successful call; 0 before.
    fn dim(&self) -> usize {
        self.dim.get().copied().unwrap_or(0)
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}", self.cfg.model_name)
    }
}
