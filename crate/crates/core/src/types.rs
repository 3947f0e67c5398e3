//! Domain types shared by every pipeline stage.
//!
//! Constructors validate the invariants; fields stay public for reading and
//! serialization, and values are never mutated once a stage hands them on.

use serde::{Deserialize, Serialize};

use crate::error::InvariantError;

/// Tolerance used when checking that a stored log-prob sum matches its tokens.
pub const LOGPROB_SUM_TOLERANCE: f64 = 1e-9;

/// One test item: a question about an image plus optional gold answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionInstance {
    pub question_id: String,
    pub question_text: String,
    pub image_ref: String,
    /// Gold answers. Only the evaluator reads these.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<Vec<String>>,
}

impl QuestionInstance {
    pub fn new(
        question_id: impl Into<String>,
        question_text: impl Into<String>,
        image_ref: impl Into<String>,
        annotations: Option<Vec<String>>,
    ) -> Result<Self, InvariantError> {
        let instance = Self {
            question_id: question_id.into(),
            question_text: question_text.into(),
            image_ref: image_ref.into(),
            annotations,
        };
        instance.validate()?;
        Ok(instance)
    }

    pub fn validate(&self) -> Result<(), InvariantError> {
        if self.question_text.trim().is_empty() {
            return Err(InvariantError::new("question_text", "must be non-empty"));
        }
        if self.image_ref.is_empty() {
            return Err(InvariantError::new("image_ref", "must be non-empty"));
        }
        if matches!(&self.annotations, Some(a) if a.is_empty()) {
            return Err(InvariantError::new(
                "annotations",
                "must hold at least one answer when present",
            ));
        }
        Ok(())
    }
}

/// Whether a sub-question pair came from the model or from the fallback path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubQuestionOrigin {
    Parsed,
    Fallback,
}

/// The image-based and knowledge-based sub-questions for one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestionPair {
    pub image_sub: String,
    pub knowledge_sub: String,
    pub origin: SubQuestionOrigin,
}

impl SubQuestionPair {
    pub fn parsed(
        image_sub: impl Into<String>,
        knowledge_sub: impl Into<String>,
    ) -> Result<Self, InvariantError> {
        let image_sub = image_sub.into().trim().to_string();
        let knowledge_sub = knowledge_sub.into().trim().to_string();
        if image_sub.is_empty() {
            return Err(InvariantError::new("image_sub", "must be non-empty"));
        }
        if knowledge_sub.is_empty() {
            return Err(InvariantError::new("knowledge_sub", "must be non-empty"));
        }
        Ok(Self {
            image_sub,
            knowledge_sub,
            origin: SubQuestionOrigin::Parsed,
        })
    }

    /// Both sub-questions equal the original question (the coupled baseline).
    pub fn fallback(original_question: &str) -> Self {
        Self {
            image_sub: original_question.to_string(),
            knowledge_sub: original_question.to_string(),
            origin: SubQuestionOrigin::Fallback,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.origin == SubQuestionOrigin::Fallback
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeSource {
    Elicited,
    LocalCaption,
}

/// One knowledge snippet, optionally scored by the re-ranker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub text: String,
    pub source: KnowledgeSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl KnowledgeItem {
    pub fn new(text: impl Into<String>, source: KnowledgeSource) -> Result<Self, InvariantError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(InvariantError::new("text", "knowledge text must be non-empty"));
        }
        Ok(Self {
            text,
            source,
            score: None,
        })
    }

    pub fn with_score(mut self, score: f64) -> Result<Self, InvariantError> {
        if !(-1.0..=1.0).contains(&score) {
            return Err(InvariantError::new(
                "score",
                format!("{score} lies outside [-1, 1]"),
            ));
        }
        self.score = Some(score);
        Ok(self)
    }
}

/// A caption of the test image, together with the prompt that conditioned it.
///
/// The empty caption is reserved as the sentinel for caption ablations; the
/// answering prompt renders it as a missing `Context:` line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub prompt_used: String,
}

impl Caption {
    pub fn new(text: impl Into<String>, prompt_used: impl Into<String>) -> Result<Self, InvariantError> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(InvariantError::new("text", "caption text must be non-empty"));
        }
        Ok(Self {
            text,
            prompt_used: prompt_used.into(),
        })
    }

    pub fn omitted() -> Self {
        Self {
            text: String::new(),
            prompt_used: String::new(),
        }
    }

    pub fn is_omitted(&self) -> bool {
        self.text.is_empty()
    }
}

/// A solved training example used for in-context prompting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcExample {
    #[serde(rename = "question")]
    pub question_text: String,
    #[serde(rename = "caption")]
    pub caption_text: String,
    #[serde(rename = "answer")]
    pub answer_text: String,
    pub question_embedding: Vec<f64>,
    pub image_embedding: Vec<f64>,
}

/// One answer candidate with its per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnswer {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    /// `-inf` for an empty generation so the ensemble never prefers it.
    pub logprob_sum: f64,
}

impl ScoredAnswer {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Result<Self, InvariantError> {
        let text = text.into();
        if let Some(bad) = token_logprobs.iter().find(|lp| lp.is_nan() || **lp > 0.0) {
            return Err(InvariantError::new(
                "token_logprobs",
                format!("log-probability {bad} is not <= 0"),
            ));
        }
        if text.is_empty() {
            return Ok(Self::empty());
        }
        let logprob_sum = token_logprobs.iter().sum();
        Ok(Self {
            text,
            token_logprobs,
            logprob_sum,
        })
    }

    pub fn empty() -> Self {
        Self {
            text: String::new(),
            token_logprobs: Vec::new(),
            logprob_sum: f64::NEG_INFINITY,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// Mean per-token log-probability, used only when length normalization is on.
    pub fn mean_logprob(&self) -> f64 {
        if self.token_logprobs.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.logprob_sum / self.token_logprobs.len() as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn question_rejects_blank_text() {
        assert!(QuestionInstance::new("1", "   ", "img", None).is_err());
        assert!(QuestionInstance::new("1", "why?", "", None).is_err());
        assert!(QuestionInstance::new("1", "why?", "img", Some(vec![])).is_err());
        assert!(QuestionInstance::new("1", "why?", "img", Some(vec!["a".into()])).is_ok());
    }

    #[test]
    fn fallback_pair_repeats_question() {
        let pair = SubQuestionPair::fallback("What is this?");
        assert_eq!(pair.image_sub, "What is this?");
        assert_eq!(pair.knowledge_sub, "What is this?");
        assert!(pair.is_fallback());
        assert!(SubQuestionPair::parsed("", "x").is_err());
    }

    #[test]
    fn knowledge_score_range() {
        let item = KnowledgeItem::new("pandas eat bamboo", KnowledgeSource::Elicited).unwrap();
        assert!(item.clone().with_score(1.0).is_ok());
        assert!(item.clone().with_score(-1.0).is_ok());
        assert!(item.clone().with_score(1.01).is_err());
        assert!(item.with_score(f64::NAN).is_err());
        assert!(KnowledgeItem::new(" ", KnowledgeSource::LocalCaption).is_err());
    }

    #[test]
    fn scored_answer_sums_tokens() {
        let answer = ScoredAnswer::new("dog", vec![-0.1, -0.2]).unwrap();
        assert!((answer.logprob_sum - -0.3).abs() < LOGPROB_SUM_TOLERANCE);
        let single = ScoredAnswer::new("dog", vec![-0.1]).unwrap();
        assert_eq!(single.logprob_sum, -0.1);
        assert!(ScoredAnswer::new("dog", vec![0.5]).is_err());
        assert_eq!(ScoredAnswer::new("", vec![]).unwrap().logprob_sum, f64::NEG_INFINITY);
    }

    #[test]
    fn caption_sentinel() {
        assert!(Caption::omitted().is_omitted());
        assert!(Caption::new("  ", "q").is_err());
        assert!(!Caption::new("a red flower", "q").unwrap().is_omitted());
    }
}
