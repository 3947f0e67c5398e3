//! Pipeline configuration.
//!
//! The config file is a flat JSON object whose keys are the field names of
//! [`PipelineConfig`]. Missing keys take the defaults below; unknown keys are
//! rejected so typos surface instead of silently falling back to defaults.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_N_SELECTED_KNOWLEDGE: usize = 9;
pub const DEFAULT_M_EXAMPLES: usize = 10;
pub const DEFAULT_Q_ENSEMBLE: usize = 5;
pub const DEFAULT_R_RETRIEVED: usize = 10;
pub const DEFAULT_LOCAL_CAPTION_COUNT: usize = 50;

pub const ENV_LLM_ENDPOINT: &str = "DKA_LLM_ENDPOINT";
pub const ENV_LLM_API_KEY: &str = "DKA_LLM_API_KEY";
pub const ENV_CAPTION_ENDPOINT: &str = "DKA_CAPTION_ENDPOINT";
pub const ENV_EMBED_ENDPOINT: &str = "DKA_EMBED_ENDPOINT";

/// Pipeline variants that switch off one or more knowledge sources.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoKnowledge,
    OriginalQuestion,
    NoCaption,
    NoKnowledgeNoCaption,
}

impl Ablation {
    pub fn drops_knowledge(self) -> bool {
        matches!(self, Ablation::NoKnowledge | Ablation::NoKnowledgeNoCaption)
    }

    pub fn drops_caption(self) -> bool {
        matches!(self, Ablation::NoCaption | Ablation::NoKnowledgeNoCaption)
    }

    pub fn skips_decomposition(self) -> bool {
        self == Ablation::OriginalQuestion
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoKnowledge => "no_knowledge",
            Ablation::OriginalQuestion => "original_question",
            Ablation::NoCaption => "no_caption",
            Ablation::NoKnowledgeNoCaption => "no_knowledge_no_caption",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorStrategy {
    #[default]
    Similarity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_selected_knowledge: usize,
    pub m_examples: usize,
    pub q_ensemble: usize,
    pub r_retrieved: usize,
    pub local_caption_count: usize,
    pub ablation: Ablation,
    pub selector_strategy: SelectorStrategy,
    pub random_seed: Option<u64>,

    pub llm_endpoint: Option<String>,
    pub llm_api_key: Option<String>,
    pub llm_model: String,
    /// Per-stage model overrides; fall back to `llm_model`.
    pub decompose_model: Option<String>,
    pub elicit_model: Option<String>,
    pub answer_model: Option<String>,
    pub caption_endpoint: Option<String>,
    pub caption_model: String,
    pub embed_endpoint: Option<String>,
    pub embed_model: String,
    pub embed_dimension: Option<usize>,
    /// Directory that image references are resolved against.
    pub image_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,

    /// Rank candidates by mean rather than summed token log-prob.
    pub length_normalize: bool,
    /// Use the leave-one-annotator-out averaged accuracy.
    pub strict_vqa_accuracy: bool,
    /// In-flight request cap per backend.
    pub max_in_flight: usize,
    pub request_timeout_secs: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_selected_knowledge: DEFAULT_N_SELECTED_KNOWLEDGE,
            m_examples: DEFAULT_M_EXAMPLES,
            q_ensemble: DEFAULT_Q_ENSEMBLE,
            r_retrieved: DEFAULT_R_RETRIEVED,
            local_caption_count: DEFAULT_LOCAL_CAPTION_COUNT,
            ablation: Ablation::None,
            selector_strategy: SelectorStrategy::Similarity,
            random_seed: None,
            llm_endpoint: None,
            llm_api_key: None,
            llm_model: "llama-2-13b".to_string(),
            decompose_model: None,
            elicit_model: None,
            answer_model: None,
            caption_endpoint: None,
            caption_model: "promptcap".to_string(),
            embed_endpoint: None,
            embed_model: "blip".to_string(),
            embed_dimension: None,
            image_dir: None,
            cache_dir: None,
            length_normalize: false,
            strict_vqa_accuracy: false,
            max_in_flight: 8,
            request_timeout_secs: 60,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at `{key}`: {message}")]
    Parse { key: String, message: String },
    #[error("invalid config value `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("missing required backend endpoint `{key}` (set it in the config or via {env})")]
    MissingEndpoint { key: String, env: &'static str },
}

impl ConfigError {
    /// Key path of the offending entry, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Parse { key, .. }
            | ConfigError::Invalid { key, .. }
            | ConfigError::MissingEndpoint { key, .. } => Some(key),
        }
    }
}

/// Whether backend endpoints must be present after loading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointPolicy {
    Required,
    /// Offline runs against fixture backends.
    Optional,
}

impl PipelineConfig {
    pub fn validate(&self, endpoints: EndpointPolicy) -> Result<(), ConfigError> {
        let counts = [
            ("n_selected_knowledge", self.n_selected_knowledge),
            ("m_examples", self.m_examples),
            ("q_ensemble", self.q_ensemble),
            ("r_retrieved", self.r_retrieved),
            ("local_caption_count", self.local_caption_count),
            ("max_in_flight", self.max_in_flight),
        ];
        for (key, value) in counts {
            if value < 1 {
                return Err(ConfigError::Invalid {
                    key: key.to_string(),
                    reason: format!("must be >= 1, got {value}"),
                });
            }
        }
        if self.embed_dimension == Some(0) {
            return Err(ConfigError::Invalid {
                key: "embed_dimension".into(),
                reason: "must be >= 1".into(),
            });
        }
        if self.selector_strategy == SelectorStrategy::Random && self.random_seed.is_none() {
            return Err(ConfigError::Invalid {
                key: "random_seed".into(),
                reason: "required when selector_strategy is random".into(),
            });
        }
        if endpoints == EndpointPolicy::Required {
            let required = [
                ("llm_endpoint", &self.llm_endpoint, ENV_LLM_ENDPOINT),
                ("caption_endpoint", &self.caption_endpoint, ENV_CAPTION_ENDPOINT),
                ("embed_endpoint", &self.embed_endpoint, ENV_EMBED_ENDPOINT),
            ];
            for (key, value, env) in required {
                if value.as_deref().is_none_or(|v| v.trim().is_empty()) {
                    return Err(ConfigError::MissingEndpoint {
                        key: key.to_string(),
                        env,
                    });
                }
            }
        }
        Ok(())
    }

    /// Fill absent endpoint and credential fields from the environment.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) {
        let slots = [
            (&mut self.llm_endpoint, ENV_LLM_ENDPOINT),
            (&mut self.llm_api_key, ENV_LLM_API_KEY),
            (&mut self.caption_endpoint, ENV_CAPTION_ENDPOINT),
            (&mut self.embed_endpoint, ENV_EMBED_ENDPOINT),
        ];
        for (slot, env) in slots {
            if slot.is_none() {
                *slot = lookup(env).filter(|v| !v.is_empty());
            }
        }
    }

    pub fn decompose_model(&self) -> &str {
        self.decompose_model.as_deref().unwrap_or(&self.llm_model)
    }

    pub fn elicit_model(&self) -> &str {
        self.elicit_model.as_deref().unwrap_or(&self.llm_model)
    }

    pub fn answer_model(&self) -> &str {
        self.answer_model.as_deref().unwrap_or(&self.llm_model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A copy safe to write next to run outputs.
    pub fn redacted(&self) -> Self {
        let mut copy = self.clone();
        if copy.llm_api_key.is_some() {
            copy.llm_api_key = Some("<redacted>".into());
        }
        copy
    }
}

/// Parse a config document without consulting the environment.
pub fn parse_config(body: &str) -> Result<PipelineConfig, ConfigError> {
    if body.trim().is_empty() {
        return Ok(PipelineConfig::default());
    }
    let de = &mut serde_json::Deserializer::from_str(body);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let path = err.path().to_string();
        let key = if path == "." { "<root>".to_string() } else { path };
        ConfigError::Parse {
            key,
            message: err.into_inner().to_string(),
        }
    })
}

pub fn load_config_from_str(
    body: &str,
    env: impl Fn(&str) -> Option<String>,
    endpoints: EndpointPolicy,
) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = parse_config(body)?;
    cfg.apply_env(env);
    cfg.validate(endpoints)?;
    Ok(cfg)
}

/// Load and validate a config file; endpoints may come from the environment.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    load_config_with(path, EndpointPolicy::Required)
}

pub fn load_config_with(path: &Path, endpoints: EndpointPolicy) -> Result<PipelineConfig, ConfigError> {
    let body = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_config_from_str(&body, |k| std::env::var(k).ok(), endpoints)
}
