//! Fixture-driven deterministic backends.
//!
//! A fixture file is JSON:
//!
//! ```json
//! {
//!   "digests": { "<sha256 of backend_id || canonical request>": {"text": "...", "logprobs": [-0.1]} },
//!   "prompts": { "<exact prompt>": {"text": "..."} },
//!   "rules": [ {"backend": "mock-answer", "contains": ["..."], "ends_with": "...",
//!               "response": {"text": "...", "logprobs": [...]}} ],
//!   "default_generation": {"text": "..."},
//!   "captions": { "<image_ref>": { "<prompt>": "caption", "*": "fallback caption" } },
//!   "local_captions": { "<image_ref>": ["...", "..."] },
//!   "images": ["<image_ref>", ...],
//!   "embedding_dimension": 64
//! }
//! ```
//!
//! Generation lookup order is digest, exact prompt, first matching rule, then
//! `default_generation`. Embeddings need no fixtures: each input maps to a
//! pseudo-random unit vector seeded by a hash of the input.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::canonical::{request_digest, BackendRequest};
use super::{
    distinct_local_captions, BackendError, CaptionBackend, EmbeddingBackend, EmbeddingResponse, GenerationRequest,
    GenerationResponse, TextGenerator, MOCK_EMBEDDING_DIMENSION,
};
use crate::types::{Caption, KnowledgeItem};

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct FixtureGeneration {
    pub text: String,
    #[serde(default)]
    pub logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRule {
    /// Restrict the rule to one backend id.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub ends_with: Option<String>,
    pub response: FixtureGeneration,
}

impl GenerationRule {
    fn matches(&self, backend_id: &str, prompt: &str) -> bool {
        self.backend.as_deref().is_none_or(|b| b == backend_id)
            && self.contains.iter().all(|s| prompt.contains(s.as_str()))
            && self.ends_with.as_deref().is_none_or(|s| prompt.ends_with(s))
    }
}

fn default_dimension() -> usize {
    MOCK_EMBEDDING_DIMENSION
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fixtures {
    #[serde(default)]
    pub digests: BTreeMap<String, FixtureGeneration>,
    #[serde(default)]
    pub prompts: BTreeMap<String, FixtureGeneration>,
    #[serde(default)]
    pub rules: Vec<GenerationRule>,
    #[serde(default)]
    pub default_generation: Option<FixtureGeneration>,
    #[serde(default)]
    pub captions: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default)]
    pub local_captions: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub images: BTreeSet<String>,
    #[serde(default = "default_dimension")]
    pub embedding_dimension: usize,
}

impl Default for Fixtures {
    fn default() -> Self {
        Self::from_json("{}").expect("empty fixtures parse")
    }
}

impl Fixtures {
    pub fn from_json(body: &str) -> Result<Self, BackendError> {
        serde_json::from_str(body).map_err(|e| BackendError::Fixture {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let body = std::fs::read_to_string(path).map_err(|e| BackendError::Fixture {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&body).map_err(|e| match e {
            BackendError::Fixture { message, .. } => BackendError::Fixture {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    fn knows_image(&self, image_ref: &str) -> bool {
        self.images.contains(image_ref)
            || self.captions.contains_key(image_ref)
            || self.local_captions.contains_key(image_ref)
    }

    fn lookup_generation(&self, backend_id: &str, req: &GenerationRequest) -> Option<&FixtureGeneration> {
        let digest = request_digest(backend_id, &BackendRequest::Generate(req).canonical());
        self.digests
            .get(&digest)
            .or_else(|| self.prompts.get(&req.prompt))
            .or_else(|| {
                self.rules
                    .iter()
                    .find(|r| r.matches(backend_id, &req.prompt))
                    .map(|r| &r.response)
            })
            .or(self.default_generation.as_ref())
    }
}

/// Mock text generator; records every prompt it serves.
pub struct MockGenerator {
    id: String,
    fixtures: Arc<Fixtures>,
    calls: AtomicU64,
    prompts: Mutex<Vec<String>>,
}

impl MockGenerator {
    pub fn new(id: impl Into<String>, fixtures: Arc<Fixtures>) -> Self {
        Self {
            id: id.into(),
            fixtures,
            calls: AtomicU64::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn recorded_prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log").clone()
    }
}

#[async_trait]
impl TextGenerator for MockGenerator {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().expect("prompt log").push(req.prompt.clone());
        req.validate()?;
        let fixture = self
            .fixtures
            .lookup_generation(&self.id, req)
            .ok_or_else(|| BackendError::FixtureMissing {
                backend: self.id.clone(),
                detail: format!("prompt starting {:?}", req.prompt.chars().take(60).collect::<String>()),
            })?;
        let token_logprobs = if req.want_logprobs {
            fixture.logprobs.clone().unwrap_or_default()
        } else {
            Vec::new()
        };
        GenerationResponse {
            text: fixture.text.clone(),
            token_logprobs,
        }
        .check(req, &self.id)
    }
}

pub struct MockCaptioner {
    id: String,
    fixtures: Arc<Fixtures>,
    caption_calls: AtomicU64,
    local_calls: AtomicU64,
}

impl MockCaptioner {
    pub fn new(id: impl Into<String>, fixtures: Arc<Fixtures>) -> Self {
        Self {
            id: id.into(),
            fixtures,
            caption_calls: AtomicU64::new(0),
            local_calls: AtomicU64::new(0),
        }
    }

    pub fn caption_calls(&self) -> u64 {
        self.caption_calls.load(Ordering::SeqCst)
    }

    pub fn local_caption_calls(&self) -> u64 {
        self.local_calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl CaptionBackend for MockCaptioner {
    fn backend_id(&self) -> &str {
        &self.id
    }

    async fn caption(&self, image_ref: &str, prompt: &str) -> Result<Caption, BackendError> {
        self.caption_calls.fetch_add(1, Ordering::SeqCst);
        if !self.fixtures.knows_image(image_ref) {
            return Err(BackendError::ImageNotFound {
                image_ref: image_ref.to_string(),
            });
        }
        let text = self
            .fixtures
            .captions
            .get(image_ref)
            .and_then(|by_prompt| by_prompt.get(prompt).or_else(|| by_prompt.get("*")))
            .ok_or_else(|| BackendError::FixtureMissing {
                backend: self.id.clone(),
                detail: format!("caption for ({image_ref}, {prompt:?})"),
            })?;
        Caption::new(text.as_str(), prompt).map_err(|_| BackendError::EmptyCaption {
            backend: self.id.clone(),
            image_ref: image_ref.to_string(),
        })
    }

    async fn local_captions(&self, image_ref: &str, count: usize) -> Result<Vec<KnowledgeItem>, BackendError> {
        self.local_calls.fetch_add(1, Ordering::SeqCst);
        if !self.fixtures.knows_image(image_ref) {
            return Err(BackendError::ImageNotFound {
                image_ref: image_ref.to_string(),
            });
        }
        let raw = self.fixtures.local_captions.get(image_ref).map(Vec::as_slice).unwrap_or(&[]);
        let items = distinct_local_captions(raw, count);
        if items.is_empty() {
            return Err(BackendError::NoLocalCaptions {
                backend: self.id.clone(),
                image_ref: image_ref.to_string(),
            });
        }
        Ok(items)
    }
}

/// Hash-seeded embeddings: a pure function of (modality, input).
pub struct MockEmbedder {
    id: String,
    dimension: usize,
    calls: AtomicU64,
}

impl MockEmbedder {
    pub fn new(id: impl Into<String>, dimension: usize) -> Self {
        Self {
            id: id.into(),
            dimension,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn vector(&self, modality: &str, input: &str) -> Result<EmbeddingResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        EmbeddingResponse::unit(hash_seeded_vector(modality, input, self.dimension), Some(self.dimension), &self.id)
    }
}

/// Standard-normal vector seeded by `sha256(modality || 0x00 || input)`.
pub fn hash_seeded_vector(modality: &str, input: &str, dimension: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(modality.as_bytes());
    hasher.update([0u8]);
    hasher.update(input.as_bytes());
    let seed: [u8; 32] = hasher.finalize().into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dimension).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[async_trait]
impl EmbeddingBackend for MockEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dimension)
    }

    async fn embed_text(&self, text: &str) -> Result<EmbeddingResponse, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_text" });
        }
        self.vector("text", text)
    }

    async fn embed_image(&self, image_ref: &str) -> Result<EmbeddingResponse, BackendError> {
        if image_ref.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_image" });
        }
        self.vector("image", image_ref)
    }
}
