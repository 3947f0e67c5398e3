//! HTTP+JSON clients speaking the chat-completions and embeddings wire formats.
//!
//! Endpoints are full URLs (for example `http://host:8000/v1/chat/completions`).
//! Captioning uses the chat-completions format with an `image_url` content
//! part carrying either the original URL or a base64 data URL.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    distinct_local_captions, BackendError, CaptionBackend, EmbeddingBackend, EmbeddingResponse, GenerationRequest,
    GenerationResponse, RetryPolicy, TextGenerator,
};
use crate::types::{Caption, KnowledgeItem};

/// Prompt used to sample region captions for the local-caption stream.
pub const LOCAL_CAPTION_PROMPT: &str = "Describe one region of this image in a short caption.";
const LOCAL_CAPTION_TEMPERATURE: f64 = 1.0;
const CAPTION_MAX_TOKENS: u32 = 64;

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl HttpSettings {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    pub fn api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }
}

/// Shared POST-with-retries plumbing.
struct JsonPoster {
    http: reqwest::Client,
    settings: HttpSettings,
    id: String,
}

impl JsonPoster {
    fn new(settings: HttpSettings, id: String) -> Result<Self, BackendError> {
        let http = reqwest::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::InvalidRequest(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { http, settings, id })
    }

    async fn post(&self, body: &Value) -> Result<Value, BackendError> {
        self.settings.retry.run(|_| self.post_once(body)).await
    }

    async fn post_once(&self, body: &Value) -> Result<Value, BackendError> {
        let mut request = self.http.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.settings.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().await.map_err(|e| self.transport(e))?;
        let status = response.status();
        let text = response.text().await.map_err(|e| self.transport(e))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transport {
                backend: self.id.clone(),
                attempts: 1,
                message: format!("HTTP {status}: {}", truncate(&text, 200)),
            });
        }
        if !status.is_success() {
            return Err(BackendError::Status {
                backend: self.id.clone(),
                status: status.as_u16(),
                body: truncate(&text, 500),
            });
        }
        serde_json::from_str(&text).map_err(|e| self.malformed(format!("invalid JSON: {e}")))
    }

    fn transport(&self, e: reqwest::Error) -> BackendError {
        BackendError::Transport {
            backend: self.id.clone(),
            attempts: 1,
            message: e.to_string(),
        }
    }

    fn malformed(&self, message: impl Into<String>) -> BackendError {
        BackendError::Malformed {
            backend: self.id.clone(),
            message: message.into(),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize, Serialize)]
struct TokenLogprob {
    #[serde(default)]
    token: String,
    logprob: f64,
}

impl JsonPoster {
    fn parse_choices(&self, body: Value) -> Result<Vec<ChatChoice>, BackendError> {
        let parsed: ChatResponse =
            serde_json::from_value(body).map_err(|e| self.malformed(format!("unexpected chat response: {e}")))?;
        if parsed.choices.is_empty() {
            return Err(self.malformed("response has no choices"));
        }
        Ok(parsed.choices)
    }
}

/// Chat-completions generation client.
pub struct ChatClient {
    poster: JsonPoster,
}

impl ChatClient {
    pub fn new(settings: HttpSettings) -> Result<Self, BackendError> {
        let id = format!("chat:{}", settings.model);
        Ok(Self {
            poster: JsonPoster::new(settings, id)?,
        })
    }

    /// Request body in the chat-completions wire format.
    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let mut body = json!({
            "model": self.poster.settings.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "logprobs": req.want_logprobs,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        body
    }
}

#[async_trait]
impl TextGenerator for ChatClient {
    fn backend_id(&self) -> &str {
        &self.poster.id
    }

    async fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        req.validate()?;
        let body = self.poster.post(&self.request_body(req)).await?;
        let choice = self.poster.parse_choices(body)?.swap_remove(0);
        let text = choice.message.content.unwrap_or_default();
        let token_logprobs = if req.want_logprobs {
            choice
                .logprobs
                .and_then(|lp| lp.content)
                .map(|tokens| tokens.into_iter().map(|t| t.logprob).collect())
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        GenerationResponse { text, token_logprobs }.check(req, &self.poster.id)
    }
}

/// Resolve an image reference into a URL the wire format can carry.
///
/// `http(s)://` and `data:` references pass through. Anything else is a file
/// path, tried as given, under `image_dir`, and with common image extensions.
pub fn resolve_image(image_ref: &str, image_dir: Option<&Path>) -> Result<String, BackendError> {
    if image_ref.starts_with("http://") || image_ref.starts_with("https://") || image_ref.starts_with("data:") {
        return Ok(image_ref.to_string());
    }
    let mut candidates: Vec<PathBuf> = Vec::new();
    let bases: Vec<PathBuf> = match image_dir {
        Some(dir) => vec![dir.join(image_ref), PathBuf::from(image_ref)],
        None => vec![PathBuf::from(image_ref)],
    };
    for base in bases {
        candidates.push(base.clone());
        for ext in ["jpg", "jpeg", "png"] {
            let mut with_ext = base.clone().into_os_string();
            with_ext.push(format!(".{ext}"));
            candidates.push(PathBuf::from(with_ext));
        }
    }
    let path = candidates
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| BackendError::ImageNotFound {
            image_ref: image_ref.to_string(),
        })?;
    let bytes = std::fs::read(&path).map_err(|_| BackendError::ImageNotFound {
        image_ref: image_ref.to_string(),
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/jpeg",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Caption client: chat-completions with an image content part.
pub struct CaptionClient {
    poster: JsonPoster,
    image_dir: Option<PathBuf>,
}

impl CaptionClient {
    pub fn new(settings: HttpSettings, image_dir: Option<PathBuf>) -> Result<Self, BackendError> {
        let id = format!("caption:{}", settings.model);
        Ok(Self {
            poster: JsonPoster::new(settings, id)?,
            image_dir,
        })
    }

    fn body(&self, image_url: &str, prompt: &str, n: usize, temperature: f64) -> Value {
        json!({
            "model": self.poster.settings.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": image_url}}
                ]
            }],
            "temperature": temperature,
            "max_tokens": CAPTION_MAX_TOKENS,
            "n": n,
        })
    }
}

#[async_trait]
impl CaptionBackend for CaptionClient {
    fn backend_id(&self) -> &str {
        &self.poster.id
    }

    async fn caption(&self, image_ref: &str, prompt: &str) -> Result<Caption, BackendError> {
        let url = resolve_image(image_ref, self.image_dir.as_deref())?;
        let body = self.poster.post(&self.body(&url, prompt, 1, 0.0)).await?;
        let text = self
            .poster
            .parse_choices(body)?
            .swap_remove(0)
            .message
            .content
            .unwrap_or_default();
        Caption::new(text, prompt).map_err(|_| BackendError::EmptyCaption {
            backend: self.poster.id.clone(),
            image_ref: image_ref.to_string(),
        })
    }

    async fn local_captions(&self, image_ref: &str, count: usize) -> Result<Vec<KnowledgeItem>, BackendError> {
        let url = resolve_image(image_ref, self.image_dir.as_deref())?;
        let body = self
            .poster
            .post(&self.body(&url, LOCAL_CAPTION_PROMPT, count, LOCAL_CAPTION_TEMPERATURE))
            .await?;
        let choices = self.poster.parse_choices(body)?;
        let items = distinct_local_captions(
            choices.into_iter().filter_map(|c| c.message.content),
            count,
        );
        if items.is_empty() {
            return Err(BackendError::NoLocalCaptions {
                backend: self.poster.id.clone(),
                image_ref: image_ref.to_string(),
            });
        }
        Ok(items)
    }
}

#[derive(Debug, Deserialize)]
struct EmbeddingsBody {
    data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Embeddings-endpoint client serving both text and images in one space.
pub struct EmbeddingClient {
    poster: JsonPoster,
    image_dir: Option<PathBuf>,
    dimension: OnceLock<usize>,
}

impl EmbeddingClient {
    pub fn new(settings: HttpSettings, declared_dimension: Option<usize>, image_dir: Option<PathBuf>) -> Result<Self, BackendError> {
        let id = format!("embed:{}", settings.model);
        let dimension = OnceLock::new();
        if let Some(d) = declared_dimension {
            let _ = dimension.set(d);
        }
        Ok(Self {
            poster: JsonPoster::new(settings, id)?,
            image_dir,
            dimension,
        })
    }

    async fn embed(&self, input: String, modality: &str) -> Result<EmbeddingResponse, BackendError> {
        let body = json!({
            "model": self.poster.settings.model,
            "input": [input],
            "input_type": modality,
        });
        let parsed: EmbeddingsBody = serde_json::from_value(self.poster.post(&body).await?)
            .map_err(|e| self.poster.malformed(format!("unexpected embeddings response: {e}")))?;
        let raw = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| self.poster.malformed("response has no embeddings"))?
            .embedding;
        // The first response fixes the dimension when none was declared.
        let declared = *self.dimension.get_or_init(|| raw.len());
        EmbeddingResponse::unit(raw, Some(declared), &self.poster.id)
    }
}

#[async_trait]
impl EmbeddingBackend for EmbeddingClient {
    fn backend_id(&self) -> &str {
        &self.poster.id
    }

    fn dimension(&self) -> Option<usize> {
        self.dimension.get().copied()
    }

    async fn embed_text(&self, text: &str) -> Result<EmbeddingResponse, BackendError> {
        if text.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_text" });
        }
        self.embed(text.to_string(), "text").await
    }

    async fn embed_image(&self, image_ref: &str) -> Result<EmbeddingResponse, BackendError> {
        if image_ref.is_empty() {
            return Err(BackendError::EmptyInput { op: "embed_image" });
        }
        let url = resolve_image(image_ref, self.image_dir.as_deref())?;
        self.embed(url, "image").await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolve_passes_urls_and_finds_files() {
        assert_eq!(resolve_image("https://x/y.jpg", None).unwrap(), "https://x/y.jpg");
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img_001.png"), [1u8, 2, 3]).unwrap();
        let url = resolve_image("img_001", Some(dir.path())).unwrap();
        assert_eq!(url, "data:image/png;base64,AQID");
        match resolve_image("img_404", Some(dir.path())) {
            Err(BackendError::ImageNotFound { image_ref }) => assert_eq!(image_ref, "img_404"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn chat_body_shape() {
        let client = ChatClient::new(HttpSettings::new("http://localhost:1/v1/chat/completions", "llama")).unwrap();
        let req = GenerationRequest::greedy("hello", 10).with_logprobs().with_stop("\n");
        let body = client.request_body(&req);
        assert_eq!(body["model"], "llama");
        assert_eq!(body["messages"][0]["content"], "hello");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["max_tokens"], 10);
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["stop"][0], "\n");
    }
}
