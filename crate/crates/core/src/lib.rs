//! Disentangled knowledge acquisition for knowledge-based visual question
//! answering.
//!
//! A question is split into an image-based and a knowledge-based
//! sub-question. The first conditions a caption of the image; the second,
//! together with that caption, elicits knowledge statements from a language
//! model. Elicited statements and local region captions are re-ranked against
//! the image embedding, similar solved examples are selected as in-context
//! demonstrations, and several answering prompts are ensembled by summed
//! token log-probability.
//!
//! All model access goes through the traits in [`backends`], so the pipeline
//! runs against HTTP services or deterministic fixtures alike.

pub mod acquire;
pub mod answer;
pub mod backends;
pub mod config;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod rank;
pub mod types;

pub use config::{load_config, Ablation, PipelineConfig, SelectorStrategy};
pub use error::{Error, InvariantError, Result};
pub use pipeline::{Pipeline, RunDir, StageBackends};
pub use types::{Caption, IcExample, KnowledgeItem, KnowledgeSource, QuestionInstance, ScoredAnswer, SubQuestionPair};
