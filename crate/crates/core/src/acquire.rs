//! Knowledge acquisition: the question-aware caption, elicited knowledge
//! statements, and the local-caption pool.

use std::collections::HashSet;

use crate::backends::{
    dedup_key, BackendError, CaptionBackend, GenerationRequest, TextGenerator, KNOWLEDGE_ITEM_MAX_TOKENS,
};
use crate::config::PipelineConfig;
use crate::types::{Caption, KnowledgeItem, KnowledgeSource, SubQuestionPair};

/// Minimum length of a parsed knowledge statement.
const MIN_STATEMENT_CHARS: usize = 3;

pub async fn acquire_caption(
    subs: &SubQuestionPair,
    image_ref: &str,
    cfg: &PipelineConfig,
    captioner: &dyn CaptionBackend,
) -> Result<Caption, BackendError> {
    if cfg.ablation.drops_caption() {
        return Ok(Caption::omitted());
    }
    captioner.caption(image_ref, &subs.image_sub).await
}

pub fn build_elicitation_prompt(knowledge_sub: &str, caption: &Caption, r: usize) -> String {
    let mut prompt = format!("Provide {r} short factual statements that help answer: {knowledge_sub}\n");
    if !caption.is_omitted() {
        prompt.push_str(&format!("Image context: {}\n", caption.text));
    }
    prompt.push_str("Number each statement.");
    prompt
}

/// Strip a `1.`, `1)` or `- ` list marker; `None` for unmarked lines.
fn strip_marker(line: &str) -> Option<&str> {
    let line = line.trim();
    if let Some(rest) = line.strip_prefix("- ") {
        return Some(rest);
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return None;
    }
    line[digits..]
        .strip_prefix('.')
        .or_else(|| line[digits..].strip_prefix(')'))
}

/// Parse a numbered or dashed list into at most `limit` statements.
pub fn parse_numbered_list(text: &str, limit: usize) -> Vec<String> {
    text.lines()
        .filter_map(strip_marker)
        .map(str::trim)
        .filter(|item| item.chars().count() >= MIN_STATEMENT_CHARS)
        .take(limit)
        .map(str::to_string)
        .collect()
}

pub async fn elicit_knowledge(
    subs: &SubQuestionPair,
    caption: &Caption,
    cfg: &PipelineConfig,
    generator: &dyn TextGenerator,
) -> Result<Vec<KnowledgeItem>, BackendError> {
    if cfg.ablation.drops_knowledge() {
        return Ok(Vec::new());
    }
    let r = cfg.r_retrieved;
    let prompt = build_elicitation_prompt(&subs.knowledge_sub, caption, r);
    let max_tokens = KNOWLEDGE_ITEM_MAX_TOKENS.saturating_mul(r as u32);
    let response = generator.generate(&GenerationRequest::greedy(prompt, max_tokens)).await?;
    let statements = parse_numbered_list(&response.text, r);
    if statements.is_empty() {
        tracing::warn!(knowledge_sub = %subs.knowledge_sub, "elicitation reply has no numbered statements");
    }
    Ok(statements
        .into_iter()
        .filter_map(|s| KnowledgeItem::new(s, KnowledgeSource::Elicited).ok())
        .collect())
}

/// Elicited items followed by local captions, deduplicated on trimmed
/// lowercase text with the first occurrence kept.
pub async fn gather_pool(
    image_ref: &str,
    elicited: Vec<KnowledgeItem>,
    cfg: &PipelineConfig,
    captioner: &dyn CaptionBackend,
) -> Result<Vec<KnowledgeItem>, BackendError> {
    let local = captioner.local_captions(image_ref, cfg.local_caption_count).await?;
    Ok(merge_pool(elicited, local.into_iter().take(cfg.local_caption_count)))
}

pub fn merge_pool(
    elicited: impl IntoIterator<Item = KnowledgeItem>,
    local: impl IntoIterator<Item = KnowledgeItem>,
) -> Vec<KnowledgeItem> {
    let mut seen = HashSet::new();
    elicited
        .into_iter()
        .chain(local)
        .filter(|item| seen.insert(dedup_key(&item.text)))
        .collect()
}
