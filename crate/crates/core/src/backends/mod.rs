//! Model backends: text generation with token log-probs, prompt-conditioned
//! captioning, and a shared text/image embedding space.
//!
//! Every capability is a trait so the pipeline can run against HTTP clients
//! ([`http`]) or fixture-driven mocks ([`mock`]). [`cache::Cached`] wraps any
//! backend with the content-addressed response cache.

pub mod cache;
pub mod canonical;
pub mod http;
pub mod mock;

use std::collections::HashSet;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Caption, KnowledgeItem, KnowledgeSource};

pub use cache::{CacheRecord, CallStats, Cached, ResponseCache};

/// Token budget for the decomposition reply.
pub const DECOMPOSE_MAX_TOKENS: u32 = 256;
/// Token budget per requested knowledge statement.
pub const KNOWLEDGE_ITEM_MAX_TOKENS: u32 = 64;
pub const ANSWER_MAX_TOKENS: u32 = 10;

/// Dimension of the mock embedding space.
pub const MOCK_EMBEDDING_DIMENSION: usize = 64;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{backend}: transport failure after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("{backend}: HTTP {status}: {body}")]
    Status {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("{backend}: malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("{backend}: log-probabilities were requested but the response carries none")]
    LogprobsMissing { backend: String },
    #[error("image not found: {image_ref}")]
    ImageNotFound { image_ref: String },
    #[error("{backend}: empty caption for image {image_ref}")]
    EmptyCaption { backend: String, image_ref: String },
    #[error("{backend}: no local captions returned for image {image_ref}")]
    NoLocalCaptions { backend: String, image_ref: String },
    #[error("empty input for {op}")]
    EmptyInput { op: &'static str },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("{backend}: embedding dimension {got} does not match declared dimension {expected}")]
    DimensionMismatch {
        backend: String,
        expected: usize,
        got: usize,
    },
    #[error("{backend}: no fixture matches request ({detail})")]
    FixtureMissing { backend: String, detail: String },
    #[error("fixture file {path}: {message}")]
    Fixture { path: String, message: String },
    #[error("cache error at {path}: {message}")]
    Cache { path: String, message: String },
}

impl BackendError {
    /// Failures worth retrying: the request never produced an application answer.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport { .. })
    }
}

/// A text generation request. Pipeline stages always decode greedily.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub want_logprobs: bool,
    pub stop_sequences: Vec<String>,
}

impl GenerationRequest {
    pub fn greedy(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens,
            temperature: 0.0,
            want_logprobs: false,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_logprobs(mut self) -> Self {
        self.want_logprobs = true;
        self
    }

    pub fn with_stop(mut self, stop: impl Into<String>) -> Self {
        self.stop_sequences.push(stop.into());
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput { op: "generate" });
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a non-negative real, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
}

impl GenerationResponse {
    /// Check the response against what the request asked for.
    pub fn check(self, req: &GenerationRequest, backend: &str) -> Result<Self, BackendError> {
        if let Some(bad) = self.token_logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(BackendError::Malformed {
                backend: backend.to_string(),
                message: format!("token log-probability {bad} is not <= 0"),
            });
        }
        if req.want_logprobs && !self.text.is_empty() && self.token_logprobs.is_empty() {
            return Err(BackendError::LogprobsMissing {
                backend: backend.to_string(),
            });
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResponse {
    pub vector: Vec<f64>,
    pub dimension: usize,
}

impl EmbeddingResponse {
    /// Normalize `raw` to unit length, checking it against a declared dimension.
    pub fn unit(raw: Vec<f64>, declared: Option<usize>, backend: &str) -> Result<Self, BackendError> {
        if let Some(expected) = declared {
            if raw.len() != expected {
                return Err(BackendError::DimensionMismatch {
                    backend: backend.to_string(),
                    expected,
                    got: raw.len(),
                });
            }
        }
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if raw.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(BackendError::Malformed {
                backend: backend.to_string(),
                message: "embedding is empty, zero or non-finite".into(),
            });
        }
        let vector: Vec<f64> = raw.iter().map(|x| x / norm).collect();
        Ok(Self {
            dimension: vector.len(),
            vector,
        })
    }
}

#[async_trait]
pub trait TextGenerator: Send + Sync {
    fn backend_id(&self) -> &str;
    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;
}

#[async_trait]
pub trait CaptionBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Caption `image_ref` conditioned on `prompt`.
    async fn caption(&self, image_ref: &str, prompt: &str) -> Result<Caption, BackendError>;

    /// Up to `count` distinct captions of question-relevant image regions.
    async fn local_captions(&self, image_ref: &str, count: usize) -> Result<Vec<KnowledgeItem>, BackendError>;
}

#[async_trait]
pub trait EmbeddingBackend: Send + Sync {
    fn backend_id(&self) -> &str;

    /// Declared dimension, if known before the first call.
    fn dimension(&self) -> Option<usize>;

    async fn embed_text(&self, text: &str) -> Result<EmbeddingResponse, BackendError>;
    async fn embed_image(&self, image_ref: &str) -> Result<EmbeddingResponse, BackendError>;
}

#[async_trait]
impl<T: TextGenerator + ?Sized> TextGenerator for std::sync::Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        (**self).generate(req).await
    }
}

#[async_trait]
impl<T: CaptionBackend + ?Sized> CaptionBackend for std::sync::Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    async fn caption(&self, image_ref: &str, prompt: &str) -> Result<Caption, BackendError> {
        (**self).caption(image_ref, prompt).await
    }

    async fn local_captions(&self, image_ref: &str, count: usize) -> Result<Vec<KnowledgeItem>, BackendError> {
        (**self).local_captions(image_ref, count).await
    }
}

#[async_trait]
impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }

    fn dimension(&self) -> Option<usize> {
        (**self).dimension()
    }

    async fn embed_text(&self, text: &str) -> Result<EmbeddingResponse, BackendError> {
        (**self).embed_text(text).await
    }

    async fn embed_image(&self, image_ref: &str) -> Result<EmbeddingResponse, BackendError> {
        (**self).embed_image(image_ref).await
    }
}

/// Dedup key shared by local captions and the knowledge pool.
pub fn dedup_key(text: &str) -> String {
    text.trim().to_lowercase()
}

/// Turn raw caption strings into at most `count` distinct local-caption items.
pub fn distinct_local_captions<I, S>(raw: I, count: usize) -> Vec<KnowledgeItem>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = HashSet::new();
    raw.into_iter()
        .filter_map(|s| {
            let text = s.as_ref().trim();
            if text.is_empty() || !seen.insert(dedup_key(text)) {
                return None;
            }
            KnowledgeItem::new(text, KnowledgeSource::LocalCaption).ok()
        })
        .take(count)
        .collect()
}

/// Retry schedule for transport-level failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    /// Run `op`, retrying transient failures with exponential backoff.
    pub async fn run<T, F, Fut>(&self, mut op: F) -> Result<T, BackendError>
    where
        F: FnMut(u32) -> Fut,
        Fut: std::future::Future<Output = Result<T, BackendError>>,
    {
        let mut backoff = self.initial_backoff;
        let mut attempt = 1;
        loop {
            match op(attempt).await {
                Err(err) if err.is_transient() && attempt < self.max_attempts => {
                    tracing::warn!(attempt, error = %err, "transient backend failure, retrying");
                    tokio::time::sleep(backoff).await;
                    backoff *= 2;
                    attempt += 1;
                }
                Err(BackendError::Transport { backend, message, .. }) => {
                    return Err(BackendError::Transport {
                        backend,
                        attempts: attempt,
                        message,
                    })
                }
                other => return other,
            }
        }
    }
}
