//! Question decomposition into an image-based and a knowledge-based
//! sub-question.

use serde_json::Value;
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, TextGenerator, DECOMPOSE_MAX_TOKENS};
use crate::config::PipelineConfig;
use crate::types::{QuestionInstance, SubQuestionPair};

pub const QUESTION_PLACEHOLDER: &str = "{question}";

pub const DECOMPOSITION_TEMPLATE: &str = "To answer the question {question} from an image, you should decouple the question into two sub-questions.\n\
\n\
One sub-question should guide a question-aware caption model to acquire information from the image.\n\
\n\
Then based on the information from the image, the other sub-question should acquire information from an extra knowledge base.\n\
\n\
You should return only two questions without explanation in a JSON format.\n\
\n\
Image-based sub-question:\n\
\n\
Knowledge-based sub-question:";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecomposeError {
    #[error("question must be non-empty")]
    EmptyQuestion,
    #[error("template must contain exactly one {QUESTION_PLACEHOLDER} placeholder, found {0}")]
    Placeholder(usize),
}

/// A prompt with a single question placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    template_text: String,
}

impl PromptTemplate {
    pub fn new(template_text: impl Into<String>) -> Result<Self, DecomposeError> {
        let template_text = template_text.into();
        let count = template_text.matches(QUESTION_PLACEHOLDER).count();
        if count != 1 {
            return Err(DecomposeError::Placeholder(count));
        }
        Ok(Self { template_text })
    }

    pub fn decomposition() -> Self {
        Self::new(DECOMPOSITION_TEMPLATE).expect("built-in template has one placeholder")
    }

    pub fn template_text(&self) -> &str {
        &self.template_text
    }

    pub fn render(&self, question: &str) -> Result<String, DecomposeError> {
        let question = question.trim();
        if question.is_empty() {
            return Err(DecomposeError::EmptyQuestion);
        }
        Ok(self.template_text.replacen(QUESTION_PLACEHOLDER, question, 1))
    }
}

pub fn build_decomposition_prompt(question: &str) -> Result<String, DecomposeError> {
    PromptTemplate::decomposition().render(question)
}

/// Byte ranges of balanced `{...}` spans, in order of their opening brace.
///
/// Braces inside JSON string literals are ignored.
fn balanced_objects(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'{')
        .filter_map(move |(start, _)| {
            let mut depth = 0usize;
            let mut in_string = false;
            let mut escaped = false;
            for (offset, &b) in bytes[start..].iter().enumerate() {
                if in_string {
                    match b {
                        _ if escaped => escaped = false,
                        b'\\' => escaped = true,
                        b'"' => in_string = false,
                        _ => {}
                    }
                    continue;
                }
                match b {
                    b'"' => in_string = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&text[start..=start + offset]);
                        }
                    }
                    _ => {}
                }
            }
            None
        })
}

fn non_empty_string(v: &Value) -> Option<&str> {
    v.as_str().map(str::trim).filter(|s| !s.is_empty())
}

fn pair_from_object(obj: &serde_json::Map<String, Value>) -> Option<SubQuestionPair> {
    let mut image = None;
    let mut knowledge = None;
    for (key, value) in obj {
        let key = key.to_lowercase();
        if !key.contains("question") {
            continue;
        }
        if key.contains("knowledge") {
            knowledge = knowledge.or_else(|| non_empty_string(value));
        } else if key.contains("image") {
            image = image.or_else(|| non_empty_string(value));
        }
    }
    SubQuestionPair::parsed(image?, knowledge?).ok()
}

/// Extract the sub-question pair from raw model output.
///
/// Never fails: output without a recognizable JSON object yields the
/// fallback pair built from `original_question`.
pub fn parse_subquestions(raw_llm_output: &str, original_question: &str) -> SubQuestionPair {
    balanced_objects(raw_llm_output)
        .filter_map(|candidate| match serde_json::from_str::<Value>(candidate) {
            Ok(Value::Object(obj)) => pair_from_object(&obj),
            _ => None,
        })
        .next()
        .unwrap_or_else(|| SubQuestionPair::fallback(original_question))
}

/// Decompose one question, or pass it through under the original-question ablation.
pub async fn decompose(
    question: &QuestionInstance,
    cfg: &PipelineConfig,
    generator: &dyn TextGenerator,
) -> Result<SubQuestionPair, BackendError> {
    if cfg.ablation.skips_decomposition() {
        return Ok(SubQuestionPair::fallback(&question.question_text));
    }
    let prompt = build_decomposition_prompt(&question.question_text)
        .map_err(|_| BackendError::EmptyInput { op: "decompose" })?;
    let response = generator
        .generate(&GenerationRequest::greedy(prompt, DECOMPOSE_MAX_TOKENS))
        .await?;
    let pair = parse_subquestions(&response.text, &question.question_text);
    if pair.is_fallback() {
        tracing::warn!(question_id = %question.question_id, "decomposition reply unparseable, using original question");
    }
    Ok(pair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::SubQuestionOrigin;

    const Q: &str = "What animal has similar color to the flower in the image?";

    #[test]
    fn prompt_embeds_question() {
        let prompt = build_decomposition_prompt(Q).unwrap();
        assert!(prompt.starts_with(&format!("To answer the question {Q} from an image")));
        assert!(prompt.contains("return only two questions without explanation in a JSON format"));
        assert!(prompt.contains("Image-based sub-question"));
        assert!(prompt.contains("Knowledge-based sub-question"));
        assert_eq!(prompt, build_decomposition_prompt(Q).unwrap());
        assert_eq!(build_decomposition_prompt("  "), Err(DecomposeError::EmptyQuestion));
    }

    #[test]
    fn template_placeholder_count() {
        assert_eq!(PromptTemplate::new("no slot"), Err(DecomposeError::Placeholder(0)));
        assert_eq!(
            PromptTemplate::new("{question} {question}"),
            Err(DecomposeError::Placeholder(2))
        );
    }

    #[test]
    fn parses_running_example() {
        let raw = r#"{"Image-based sub-question": "What's the color of the flower?", "Knowledge-based sub-question": "Which animal has a similar color?"}"#;
        let pair = parse_subquestions(raw, Q);
        assert_eq!(pair.origin, SubQuestionOrigin::Parsed);
        assert_eq!(pair.image_sub, "What's the color of the flower?");
        assert_eq!(pair.knowledge_sub, "Which animal has a similar color?");
    }

    #[test]
    fn extracts_json_from_prose() {
        let cases = [
            (
                "Sure! Here you go:\n```json\n{\"image_question\": \"What is on the plate?\", \"knowledge_question\": \"Where does this dish originate?\"}\n```\nHope this helps {:)}",
                ("What is on the plate?", "Where does this dish originate?"),
            ),
            (
                "Note {this} first. {\"IMAGE-BASED SUB-QUESTION Q_I\": \"Which brand is the bus?\", \"Knowledge-Based Sub-Question q_k\": \"Where is that brand from?\"} done",
                ("Which brand is the bus?", "Where is that brand from?"),
            ),
            (
                "{\"Image-based sub-question\": \"What does the {sign} say?\", \"Knowledge-based sub-question\": \"What does \\\"stop\\\" mean?\"}",
                ("What does the {sign} say?", "What does \"stop\" mean?"),
            ),
        ];
        for (raw, (image, knowledge)) in cases {
            let pair = parse_subquestions(raw, Q);
            assert_eq!(pair.origin, SubQuestionOrigin::Parsed, "{raw}");
            assert_eq!(pair.image_sub, image);
            assert_eq!(pair.knowledge_sub, knowledge);
        }
    }

    #[test]
    fn garbage_falls_back() {
        for raw in ["I cannot answer that.", "", "{", "{\"a\": 1}", "[\"x\", \"y\"]"] {
            let pair = parse_subquestions(raw, Q);
            assert_eq!(pair, SubQuestionPair::fallback(Q), "{raw:?}");
        }
    }
}
