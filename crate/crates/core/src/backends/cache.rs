//! Content-addressed response cache.
//!
//! Records are keyed by `sha256(backend_id || canonical_request)`. On disk each
//! record is one JSON file named by its key. Content is a pure function of the
//! key, so concurrent writers of one key race harmlessly; the first file to
//! land is kept and later writes of the same key are skipped.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use async_trait::async_trait;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::Semaphore;

use super::canonical::{request_digest, BackendRequest};
use super::{
    BackendError, CaptionBackend, EmbeddingBackend, EmbeddingResponse, GenerationRequest, GenerationResponse,
    TextGenerator,
};
use crate::types::{Caption, KnowledgeItem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub key: String,
    pub request_canonical: String,
    pub response: Value,
    pub backend_id: String,
    pub created_at: String,
}

impl CacheRecord {
    pub fn new(backend_id: &str, request_canonical: String, response: Value) -> Self {
        Self {
            key: request_digest(backend_id, &request_canonical),
            request_canonical,
            response,
            backend_id: backend_id.to_string(),
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, Value>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| cache_err(&dir, e))?;
        Ok(Self {
            dir: Some(dir),
            memory: RwLock::default(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn get(&self, key: &str) -> Result<Option<Value>, BackendError> {
        if let Some(v) = self.memory.read().expect("cache lock").get(key) {
            return Ok(Some(v.clone()));
        }
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        let path = dir.join(key);
        let body = match std::fs::read_to_string(&path) {
            Ok(body) => body,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(cache_err(&path, e)),
        };
        let record: CacheRecord = serde_json::from_str(&body).map_err(|e| cache_err(&path, e))?;
        if record.key != key {
            return Err(cache_err(&path, format!("record key {} does not match filename", record.key)));
        }
        self.memory
            .write()
            .expect("cache lock")
            .insert(key.to_string(), record.response.clone());
        Ok(Some(record.response))
    }

    pub fn put(&self, record: &CacheRecord) -> Result<(), BackendError> {
        self.memory
            .write()
            .expect("cache lock")
            .insert(record.key.clone(), record.response.clone());
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(&record.key);
        if path.exists() {
            return Ok(());
        }
        static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);
        let tmp = dir.join(format!(
            ".{}.{}.{}.tmp",
            record.key,
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let body = serde_json::to_vec_pretty(record).map_err(|e| cache_err(&path, e))?;
        std::fs::write(&tmp, body).map_err(|e| cache_err(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| cache_err(&path, e))
    }

    /// Number of records on disk (or in memory for an in-memory cache).
    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => std::fs::read_dir(dir)
                .map(|entries| {
                    entries
                        .filter_map(Result::ok)
                        .filter(|e| !e.file_name().to_string_lossy().starts_with('.'))
                        .count()
                })
                .unwrap_or(0),
            None => self.memory.read().expect("cache lock").len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn cache_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Request counters for one backend.
#[derive(Debug, Default)]
pub struct CallStats {
    requests: AtomicU64,
    invocations: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    /// Requests issued by the pipeline.
    pub requests: u64,
    pub cache_hits: u64,
    /// Requests that reached the wrapped backend.
    pub invocations: u64,
}

impl CallStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        let requests = self.requests.load(Ordering::SeqCst);
        let invocations = self.invocations.load(Ordering::SeqCst);
        StatsSnapshot {
            requests,
            cache_hits: requests.saturating_sub(invocations),
            invocations,
        }
    }
}

/// Cache, in-flight cap, and call accounting in front of any backend.
pub struct Cached<B> {
    inner: B,
    cache: Arc<ResponseCache>,
    stats: CallStats,
    limiter: Semaphore,
}

impl<B> Cached<B> {
    pub fn new(inner: B, cache: Arc<ResponseCache>, max_in_flight: usize) -> Self {
        Self {
            inner,
            cache,
            stats: CallStats::default(),
            limiter: Semaphore::new(max_in_flight.max(1)),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.stats.snapshot()
    }

    async fn through<T, F, Fut>(&self, backend_id: &str, request: BackendRequest<'_>, call: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<T, BackendError>>,
    {
        self.stats.requests.fetch_add(1, Ordering::SeqCst);
        let canonical = request.canonical();
        let key = request_digest(backend_id, &canonical);
        if let Some(hit) = self.cache.get(&key)? {
            return serde_json::from_value(hit).map_err(|e| BackendError::Cache {
                path: key,
                message: format!("cached response does not deserialize: {e}"),
            });
        }
        let response = {
            let _permit = self.limiter.acquire().await.expect("limiter open");
            self.stats.invocations.fetch_add(1, Ordering::SeqCst);
            call().await?
        };
        let value = serde_json::to_value(&response).map_err(|e| BackendError::Cache {
            path: key.clone(),
            message: e.to_string(),
        })?;
        self.cache.put(&CacheRecord::new(backend_id, canonical, value))?;
        Ok(response)
    }
}

#[async_trait]
impl<B: TextGenerator> TextGenerator for Cached<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        req.validate()?;
        self.through(self.inner.backend_id(), BackendRequest::Generate(req), || {
            self.inner.generate(req)
        })
        .await
    }
}

#[async_trait]
impl<B: CaptionBackend> CaptionBackend for Cached<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    async fn caption(&self, image_ref: &str, prompt: &str) -> Result<Caption, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::EmptyInput { op: "caption" });
        }
        self.through(
            self.inner.backend_id(),
            BackendRequest::Caption { image_ref, prompt },
            || self.inner.caption(image_ref, prompt),
        )
        .await
    }

    async fn local_captions(&self, image_ref: &str, count: usize) -> Result<Vec<KnowledgeItem>, BackendError> {
        if count == 0 {
            return Err(BackendError::InvalidRequest("local caption count must be >= 1".into()));
        }
        self.through(
            self.inner.backend_id(),
            BackendRequest::LocalCaptions { image_ref, count },
            || self.inner.local_captions(image_ref, count),
        )
        .await
    }
}

#[async_trait]
impl<B: EmbeddingBackend> EmbeddingBackend for Cached<B> {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn dimension(&self) -> Option<usize> {
        self.inner.dimension()
    }

    async fn embed_text(&self, text: &str) -> Result<EmbeddingResponse, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_text" });
        }
        self.through(self.inner.backend_id(), BackendRequest::EmbedText { text }, || {
            self.inner.embed_text(text)
        })
        .await
    }

    async fn embed_image(&self, image_ref: &str) -> Result<EmbeddingResponse, BackendError> {
        if image_ref.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_image" });
        }
        self.through(
            self.inner.backend_id(),
            BackendRequest::EmbedImage { image_ref },
            || self.inner.embed_image(image_ref),
        )
        .await
    }
}
