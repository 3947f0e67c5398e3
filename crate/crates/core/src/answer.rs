//! Answer prompt assembly, scored greedy generation, and the log-prob ensemble.

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationRequest, TextGenerator, ANSWER_MAX_TOKENS};
use crate::config::PipelineConfig;
use crate::error::InvariantError;
use crate::types::{Caption, IcExample, KnowledgeItem, ScoredAnswer};

pub const ANSWER_INSTRUCTION: &str =
    "Please answer the question according to the context and knowledge. Answer with one or a few words.";

pub const KNOWLEDGE_SEPARATOR: &str = "; ";

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("ensemble needs at least one candidate")]
    NoCandidates,
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("all {count} answer generations failed; first error: {first}")]
    AllFailed { count: usize, first: BackendError },
}

/// Everything one answering prompt was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub prompt_text: String,
    pub question: String,
    pub example_group: Vec<IcExample>,
    pub knowledge_used: Vec<KnowledgeItem>,
    pub caption_used: Caption,
}

/// Collapse internal whitespace so each field stays on its own line.
fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn push_block(out: &mut String, caption: &str, knowledge: &[&str], question: &str) {
    let caption = one_line(caption);
    if !caption.is_empty() {
        out.push_str(&format!("Context: {caption}\n"));
    }
    let knowledge: Vec<String> = knowledge.iter().map(|k| one_line(k)).filter(|k| !k.is_empty()).collect();
    if !knowledge.is_empty() {
        out.push_str(&format!("Knowledge: {}\n", knowledge.join(KNOWLEDGE_SEPARATOR)));
    }
    out.push_str(&format!("Question: {}\n", one_line(question)));
}

pub fn build_answer_prompt(
    question: &str,
    caption: &Caption,
    knowledge: &[KnowledgeItem],
    examples: &[IcExample],
) -> PromptBundle {
    let mut prompt = format!("{ANSWER_INSTRUCTION}\n");
    for ex in examples {
        push_block(&mut prompt, &ex.caption_text, &[], &ex.question_text);
        prompt.push_str(&format!("Answer: {}\n", one_line(&ex.answer_text)));
    }
    let knowledge_texts: Vec<&str> = knowledge.iter().map(|k| k.text.as_str()).collect();
    push_block(&mut prompt, &caption.text, &knowledge_texts, question);
    prompt.push_str("Answer:");
    PromptBundle {
        prompt_text: prompt,
        question: question.to_string(),
        example_group: examples.to_vec(),
        knowledge_used: knowledge.to_vec(),
        caption_used: caption.clone(),
    }
}

pub fn answer_request(bundle: &PromptBundle) -> GenerationRequest {
    GenerationRequest::greedy(bundle.prompt_text.clone(), ANSWER_MAX_TOKENS)
        .with_logprobs()
        .with_stop("\n")
}

pub async fn generate_answer(
    bundle: &PromptBundle,
    generator: &dyn TextGenerator,
) -> Result<ScoredAnswer, AnswerError> {
    let response = generator.generate(&answer_request(bundle)).await?;
    let text = response.text.trim();
    if text.is_empty() {
        return Ok(ScoredAnswer::empty());
    }
    if response.token_logprobs.is_empty() {
        return Err(BackendError::LogprobsMissing {
            backend: generator.backend_id().to_string(),
        }
        .into());
    }
    Ok(ScoredAnswer::new(text, response.token_logprobs)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleScoring {
    /// Summed token log-probability.
    #[default]
    Sum,
    MeanPerToken,
}

impl EnsembleScoring {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        if cfg.length_normalize {
            EnsembleScoring::MeanPerToken
        } else {
            EnsembleScoring::Sum
        }
    }

    fn score(self, answer: &ScoredAnswer) -> f64 {
        match self {
            EnsembleScoring::Sum => answer.logprob_sum,
            EnsembleScoring::MeanPerToken => answer.mean_logprob(),
        }
    }
}

/// Position of the best candidate; ties go to the lowest position.
pub fn ensemble_index(candidates: &[ScoredAnswer], scoring: EnsembleScoring) -> Result<usize, AnswerError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let s = scoring.score(c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i).ok_or(AnswerError::NoCandidates)
}

pub fn ensemble(candidates: &[ScoredAnswer]) -> Result<ScoredAnswer, AnswerError> {
    ensemble_index(candidates, EnsembleScoring::Sum).map(|i| candidates[i].clone())
}

/// Deal `pool` into `groups` groups: group g gets positions g, g+groups, ...
pub fn partition_round_robin<T: Clone>(pool: &[T], groups: usize) -> Vec<Vec<T>> {
    let groups = groups.max(1);
    let mut out = vec![Vec::new(); groups];
    for (i, item) in pool.iter().enumerate() {
        out[i % groups].push(item.clone());
    }
    out
}

/// The ensembled answer plus the per-group artifacts behind it.
#[derive(Debug, Clone)]
pub struct AnswerOutcome {
    pub answer: ScoredAnswer,
    pub chosen_group: usize,
    /// One slot per group; `None` where generation failed.
    pub candidates: Vec<Option<ScoredAnswer>>,
    pub bundles: Vec<PromptBundle>,
    pub failures: Vec<String>,
}

/// Build `q` prompts from disjoint example groups, generate, and ensemble.
pub async fn answer_question(
    question: &str,
    caption: &Caption,
    selected_knowledge: &[KnowledgeItem],
    example_pool: &[IcExample],
    cfg: &PipelineConfig,
    generator: &dyn TextGenerator,
) -> Result<AnswerOutcome, AnswerError> {
    let q = cfg.q_ensemble.max(1);
    let usable = example_pool.len().min(cfg.m_examples.saturating_mul(q));
    let bundles: Vec<PromptBundle> = partition_round_robin(&example_pool[..usable], q)
        .iter()
        .map(|group| build_answer_prompt(question, caption, selected_knowledge, group))
        .collect();

    let results = join_all(bundles.iter().map(|b| generate_answer(b, generator))).await;

    let mut candidates = Vec::with_capacity(q);
    let mut failures = Vec::new();
    let mut first_error = None;
    for (group, result) in results.into_iter().enumerate() {
        match result {
            Ok(answer) => candidates.push(Some(answer)),
            Err(AnswerError::Backend(err @ BackendError::LogprobsMissing { .. })) => return Err(err.into()),
            Err(AnswerError::Backend(err)) => {
                tracing::warn!(group, error = %err, "answer generation failed");
                failures.push(format!("group {group}: {err}"));
                first_error.get_or_insert(err);
                candidates.push(None);
            }
            Err(other) => return Err(other),
        }
    }
    let survivors: Vec<(usize, ScoredAnswer)> = candidates
        .iter()
        .enumerate()
        .filter_map(|(g, c)| c.clone().map(|c| (g, c)))
        .collect();
    if survivors.is_empty() {
        return Err(AnswerError::AllFailed {
            count: q,
            first: first_error.expect("failures recorded"),
        });
    }
    let scored: Vec<ScoredAnswer> = survivors.iter().map(|(_, c)| c.clone()).collect();
    let best = ensemble_index(&scored, EnsembleScoring::from_config(cfg))?;
    Ok(AnswerOutcome {
        answer: scored[best].clone(),
        chosen_group: survivors[best].0,
        candidates,
        bundles,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock::{Fixtures, MockGenerator};
    use crate::types::KnowledgeSource;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn example(i: usize) -> IcExample {
        IcExample {
            question_text: format!("Example question {i}?"),
            caption_text: format!("caption {i}"),
            answer_text: format!("answer {i}"),
            question_embedding: vec![1.0],
            image_embedding: vec![1.0],
        }
    }

    fn knowledge(n: usize) -> Vec<KnowledgeItem> {
        (0..n)
            .map(|i| KnowledgeItem::new(format!("fact {i}"), KnowledgeSource::Elicited).unwrap())
            .collect()
    }

    #[test]
    fn prompt_layout() {
        let caption = Caption::new("a red flower", "q").unwrap();
        let bundle = build_answer_prompt("What color?", &caption, &knowledge(2), &[example(0)]);
        assert_eq!(
            bundle.prompt_text,
            format!(
                "{ANSWER_INSTRUCTION}\nContext: caption 0\nQuestion: Example question 0?\nAnswer: answer 0\n\
                 Context: a red flower\nKnowledge: fact 0; fact 1\nQuestion: What color?\nAnswer:"
            )
        );
    }

    #[test]
    fn prompt_counts_and_determinism() {
        let caption = Caption::new("a red flower", "q").unwrap();
        let examples: Vec<_> = (0..10).map(example).collect();
        let a = build_answer_prompt("What color?", &caption, &knowledge(9), &examples);
        let b = build_answer_prompt("What color?", &caption, &knowledge(9), &examples);
        assert_eq!(a.prompt_text.matches("Question:").count(), 11);
        assert_eq!(a, b);
        let line = a.prompt_text.lines().find(|l| l.starts_with("Knowledge:")).unwrap();
        assert_eq!(line.split(KNOWLEDGE_SEPARATOR).count(), 9);
    }

    #[test]
    fn ablated_test_block_has_question_and_answer_only() {
        let bundle = build_answer_prompt("What color?", &Caption::omitted(), &[], &[example(0)]);
        assert!(bundle.prompt_text.ends_with("\nAnswer: answer 0\nQuestion: What color?\nAnswer:"));
    }

    async fn scored(fixture: &str) -> Result<ScoredAnswer, AnswerError> {
        let gen = MockGenerator::new(
            "m",
            Arc::new(Fixtures::from_json(&format!(r#"{{"default_generation": {fixture}}}"#)).unwrap()),
        );
        let bundle = build_answer_prompt("q?", &Caption::omitted(), &[], &[]);
        generate_answer(&bundle, &gen).await
    }

    #[tokio::test]
    async fn generate_answer_sums_logprobs() {
        let a = scored(r#"{"text": "red panda", "logprobs": [-0.05, -0.30]}"#).await.unwrap();
        assert_eq!(a.text, "red panda");
        assert!((a.logprob_sum - -0.35).abs() < 1e-12);
        let single = scored(r#"{"text": "dog", "logprobs": [-0.1]}"#).await.unwrap();
        assert_eq!(single.logprob_sum, -0.1);
        let empty = scored(r#"{"text": ""}"#).await.unwrap();
        assert_eq!(empty.logprob_sum, f64::NEG_INFINITY);
        assert!(matches!(
            scored(r#"{"text": "dog"}"#).await,
            Err(AnswerError::Backend(BackendError::LogprobsMissing { .. }))
        ));
    }

    fn answers(sums: &[f64]) -> Vec<ScoredAnswer> {
        sums.iter()
            .enumerate()
            .map(|(i, s)| ScoredAnswer::new(format!("a{i}"), vec![*s]).unwrap())
            .collect()
    }

    #[test]
    fn ensemble_picks_highest_sum() {
        assert_eq!(ensemble(&answers(&[-0.35, -0.20, -0.90])).unwrap().text, "a1");
        assert_eq!(ensemble(&answers(&[-0.5])).unwrap().text, "a0");
        assert_eq!(ensemble(&answers(&[-0.2, -0.2])).unwrap().text, "a0");
        assert!(matches!(ensemble(&[]), Err(AnswerError::NoCandidates)));
        let mut with_empty = answers(&[-3.0]);
        with_empty.insert(0, ScoredAnswer::empty());
        assert_eq!(ensemble(&with_empty).unwrap().text, "a0");
        assert!(ensemble(&[ScoredAnswer::empty(), ScoredAnswer::empty()]).unwrap().is_empty());
    }

    #[test]
    fn length_normalized_scoring() {
        let long = ScoredAnswer::new("red panda bear", vec![-0.1, -0.1, -0.1]).unwrap();
        let short = ScoredAnswer::new("panda", vec![-0.2]).unwrap();
        let cands = [long, short];
        assert_eq!(ensemble_index(&cands, EnsembleScoring::Sum).unwrap(), 1);
        assert_eq!(ensemble_index(&cands, EnsembleScoring::MeanPerToken).unwrap(), 0);
    }

    #[test]
    fn round_robin_twelve_into_five() {
        let groups = partition_round_robin(&(0..12).collect::<Vec<_>>(), 5);
        assert_eq!(
            groups,
            vec![vec![0, 5, 10], vec![1, 6, 11], vec![2, 7], vec![3, 8], vec![4, 9]]
        );
    }

    proptest! {
        #[test]
        fn partition_is_balanced_cover(len in 0usize..80, q in 1usize..10) {
            let pool: Vec<usize> = (0..len).collect();
            let groups = partition_round_robin(&pool, q);
            prop_assert_eq!(groups.len(), q);
            let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
            all.sort();
            prop_assert_eq!(all, pool);
            for g in &groups {
                prop_assert!(g.len() == len / q || g.len() == len.div_ceil(q));
                prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn ensemble_shift_invariant(sums in proptest::collection::vec(-20.0f64..0.0, 1..12), delta in -5.0f64..0.0) {
            let base = answers(&sums);
            let shifted: Vec<f64> = sums.iter().map(|s| s + delta).collect();
            let idx = ensemble_index(&base, EnsembleScoring::Sum).unwrap();
            let idx_shifted = ensemble_index(&answers(&shifted), EnsembleScoring::Sum).unwrap();
            // Shifting can merge two sums that differ by less than an ulp.
            prop_assert!(idx == idx_shifted || (shifted[idx] - shifted[idx_shifted]).abs() < 1e-12);
        }
    }

    fn generator(fixture: serde_json::Value) -> MockGenerator {
        MockGenerator::new("answer", Arc::new(Fixtures::from_json(&fixture.to_string()).unwrap()))
    }

    #[tokio::test]
    async fn answer_question_ensembles_groups() {
        let pool: Vec<_> = (0..50).map(example).collect();
        let gen = generator(serde_json::json!({
            "rules": [
                {"contains": ["Example question 2?"], "response": {"text": "tulip", "logprobs": [-0.1]}}
            ],
            "default_generation": {"text": "rose", "logprobs": [-0.4, -0.1]}
        }));
        let cfg = PipelineConfig::default();
        let out = answer_question("What flower?", &Caption::omitted(), &knowledge(9), &pool, &cfg, &gen)
            .await
            .unwrap();
        assert_eq!(gen.calls(), 5);
        assert_eq!(out.bundles.len(), 5);
        assert!(out.bundles.iter().all(|b| b.example_group.len() == 10));
        assert_eq!(out.answer.text, "tulip");
        assert_eq!(out.chosen_group, 2);
    }

    #[tokio::test]
    async fn q1_is_single_prompt_identity() {
        let pool: Vec<_> = (0..10).map(example).collect();
        let gen = generator(serde_json::json!({"default_generation": {"text": "rose", "logprobs": [-0.4]}}));
        let cfg = PipelineConfig {
            q_ensemble: 1,
            ..Default::default()
        };
        let out = answer_question("What flower?", &Caption::omitted(), &[], &pool, &cfg, &gen).await.unwrap();
        let direct = generate_answer(&build_answer_prompt("What flower?", &Caption::omitted(), &[], &pool), &gen)
            .await
            .unwrap();
        assert_eq!(out.answer, direct);
        assert_eq!(out.bundles.len(), 1);
    }

    #[tokio::test]
    async fn partial_failures_ensemble_survivors() {
        let pool: Vec<_> = (0..10).map(example).collect();
        let gen = generator(serde_json::json!({
            "rules": [{"contains": ["Example question 0?"], "response": {"text": "rose", "logprobs": [-0.4]}}]
        }));
        let out = answer_question("What flower?", &Caption::omitted(), &[], &pool, &PipelineConfig::default(), &gen)
            .await
            .unwrap();
        assert_eq!(out.answer.text, "rose");
        assert_eq!(out.failures.len(), 4);
        assert_eq!(out.candidates.iter().filter(|c| c.is_some()).count(), 1);

        let none = generator(serde_json::json!({}));
        assert!(matches!(
            answer_question("What flower?", &Caption::omitted(), &[], &pool, &PipelineConfig::default(), &none).await,
            Err(AnswerError::AllFailed { count: 5, .. })
        ));
    }
}
