//! Cosine similarity, top-n knowledge re-ranking against the image, and
//! in-context example selection.
//!
//! All rankings sort by score descending and break ties by original position,
//! so outputs are reproducible for golden tests.

use std::cmp::Ordering;
use std::path::Path;

use futures::future::try_join_all;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendError, EmbeddingBackend};
use crate::config::{PipelineConfig, SelectorStrategy};
use crate::types::{IcExample, KnowledgeItem, QuestionInstance};

#[derive(Debug, Error)]
pub enum RankError {
    #[error("vector length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("cosine of a zero vector is undefined")]
    ZeroVector,
    #[error("example index is empty")]
    EmptyIndex,
    #[error("example {position}: {field} has dimension {got}, index dimension is {expected}")]
    ExampleDimension {
        position: usize,
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("example {position}: answer must be non-empty")]
    EmptyAnswer { position: usize },
    #[error("query embedding has dimension {got}, expected {expected}")]
    QueryDimension { expected: usize, got: usize },
    #[error("random selection requires random_seed")]
    MissingSeed,
    #[error("cannot read example index {path}: {message}")]
    Load { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1].
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, RankError> {
    if a.len() != b.len() {
        return Err(RankError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let norm_a = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_b = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return Err(RankError::ZeroVector);
    }
    Ok((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

/// Positions of the `k` highest scores, best first, ties by lower position.
pub fn top_k_positions(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Score every pool item against the image and keep the top `n`.
pub async fn rerank_top_n(
    pool: &[KnowledgeItem],
    image_embedding: &[f64],
    n: usize,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<KnowledgeItem>, RankError> {
    if let Some(expected) = embedder.dimension() {
        if image_embedding.len() != expected {
            return Err(RankError::QueryDimension {
                expected,
                got: image_embedding.len(),
            });
        }
    }
    let embeddings = try_join_all(pool.iter().map(|item| embedder.embed_text(&item.text))).await?;
    let scores = embeddings
        .iter()
        .map(|e| cosine(&e.vector, image_embedding))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(top_k_positions(&scores, n)
        .into_iter()
        .map(|pos| KnowledgeItem {
            score: Some(scores[pos]),
            ..pool[pos].clone()
        })
        .collect())
}

/// Training examples with precomputed question and image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleIndex {
    examples: Vec<IcExample>,
    dimension: usize,
    source_path: String,
}

impl ExampleIndex {
    /// Dimension comes from the first example and is enforced on the rest.
    pub fn new(examples: Vec<IcExample>, source_path: impl Into<String>) -> Result<Self, RankError> {
        let dimension = examples.first().ok_or(RankError::EmptyIndex)?.question_embedding.len();
        for (position, ex) in examples.iter().enumerate() {
            for (field, got) in [
                ("question_embedding", ex.question_embedding.len()),
                ("image_embedding", ex.image_embedding.len()),
            ] {
                if got != dimension || got == 0 {
                    return Err(RankError::ExampleDimension {
                        position,
                        field,
                        expected: dimension,
                        got,
                    });
                }
            }
            if ex.answer_text.trim().is_empty() {
                return Err(RankError::EmptyAnswer { position });
            }
        }
        Ok(Self {
            examples,
            dimension,
            source_path: source_path.into(),
        })
    }

    /// Load a JSON array of `{question, caption, answer, question_embedding, image_embedding}`.
    pub fn load(path: &Path) -> Result<Self, RankError> {
        let load_err = |message: String| RankError::Load {
            path: path.display().to_string(),
            message,
        };
        let body = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let examples: Vec<IcExample> = serde_json::from_str(&body).map_err(|e| load_err(e.to_string()))?;
        Self::new(examples, path.display().to_string())
    }

    pub fn examples(&self) -> &[IcExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn source_path(&self) -> &str {
        &self.source_path
    }
}

/// Test-item embeddings used for example selection.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbeddings {
    pub question: Vec<f64>,
    pub image: Vec<f64>,
}

impl QueryEmbeddings {
    pub async fn embed(test: &QuestionInstance, embedder: &dyn EmbeddingBackend) -> Result<Self, RankError> {
        let (question, image) = futures::try_join!(
            embedder.embed_text(&test.question_text),
            embedder.embed_image(&test.image_ref)
        )?;
        Ok(Self {
            question: question.vector,
            image: image.vector,
        })
    }
}

/// Mean of question and image cosine similarity for every example.
pub fn similarity_scores(index: &ExampleIndex, query: &QueryEmbeddings) -> Result<Vec<f64>, RankError> {
    for v in [&query.question, &query.image] {
        if v.len() != index.dimension() {
            return Err(RankError::QueryDimension {
                expected: index.dimension(),
                got: v.len(),
            });
        }
    }
    index
        .examples()
        .iter()
        .map(|ex| {
            let q = cosine(&query.question, &ex.question_embedding)?;
            let i = cosine(&query.image, &ex.image_embedding)?;
            Ok((q + i) / 2.0)
        })
        .collect()
}

fn question_seed(seed: u64, question_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(question_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Seeded permutation of index positions, truncated to `limit`.
///
/// The permutation depends on the seed and the question id, so questions
/// draw different examples but reruns draw the same ones.
pub fn random_positions(len: usize, limit: usize, seed: u64, question_id: &str) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(question_seed(seed, question_id));
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order.truncate(limit);
    order
}

/// Ranked example positions for one test item, at most `limit` long.
pub async fn ranked_positions(
    test: &QuestionInstance,
    index: &ExampleIndex,
    limit: usize,
    cfg: &PipelineConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<usize>, RankError> {
    if index.is_empty() {
        return Err(RankError::EmptyIndex);
    }
    match cfg.selector_strategy {
        SelectorStrategy::Similarity => {
            let query = QueryEmbeddings::embed(test, embedder).await?;
            Ok(top_k_positions(&similarity_scores(index, &query)?, limit))
        }
        SelectorStrategy::Random => {
            let seed = cfg.random_seed.ok_or(RankError::MissingSeed)?;
            Ok(random_positions(index.len(), limit, seed, &test.question_id))
        }
    }
}

fn gather(index: &ExampleIndex, positions: Vec<usize>) -> Vec<IcExample> {
    positions.into_iter().map(|p| index.examples()[p].clone()).collect()
}

/// Top-`m` in-context examples for one test item.
pub async fn select_examples(
    test: &QuestionInstance,
    index: &ExampleIndex,
    m: usize,
    cfg: &PipelineConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<IcExample>, RankError> {
    Ok(gather(index, ranked_positions(test, index, m, cfg, embedder).await?))
}

/// Top `m·q` examples, to be partitioned across the `q` ensemble prompts.
pub async fn expand_example_pool(
    test: &QuestionInstance,
    index: &ExampleIndex,
    m: usize,
    q: usize,
    cfg: &PipelineConfig,
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<IcExample>, RankError> {
    let limit = m.saturating_mul(q);
    Ok(gather(index, ranked_positions(test, index, limit, cfg, embedder).await?))
}
