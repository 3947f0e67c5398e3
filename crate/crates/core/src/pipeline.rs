//! End-to-end orchestration: decompose, acquire, re-rank, select examples,
//! answer, and score, over a batch of questions with bounded concurrency.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::Serialize;
use serde_json::{json, Value};

use crate::acquire::{acquire_caption, elicit_knowledge, gather_pool};
use crate::answer::{answer_question, AnswerOutcome, PromptBundle};
use crate::backends::cache::StatsSnapshot;
use crate::backends::http::{CaptionClient, ChatClient, EmbeddingClient, HttpSettings};
use crate::backends::mock::{Fixtures, MockCaptioner, MockEmbedder, MockGenerator};
use crate::backends::{BackendError, CaptionBackend, Cached, EmbeddingBackend, ResponseCache, TextGenerator};
use crate::config::PipelineConfig;
use crate::decompose::decompose;
use crate::error::{Error, Result};
use crate::eval::{aggregate, compare_question_ids, EvalRecord, RunReport};
use crate::rank::{expand_example_pool, rerank_top_n, ExampleIndex};
use crate::types::{Caption, KnowledgeItem, QuestionInstance, SubQuestionPair};

pub type CachedGenerator = Cached<Arc<dyn TextGenerator>>;
pub type CachedCaptioner = Cached<Arc<dyn CaptionBackend>>;
pub type CachedEmbedder = Cached<Arc<dyn EmbeddingBackend>>;

/// One backend per stage, each behind the shared response cache.
pub struct StageBackends {
    pub decompose: CachedGenerator,
    pub elicit: CachedGenerator,
    pub answer: CachedGenerator,
    pub caption: CachedCaptioner,
    pub embed: CachedEmbedder,
}

impl StageBackends {
    pub fn new(
        decompose: Arc<dyn TextGenerator>,
        elicit: Arc<dyn TextGenerator>,
        answer: Arc<dyn TextGenerator>,
        caption: Arc<dyn CaptionBackend>,
        embed: Arc<dyn EmbeddingBackend>,
        cache: Arc<ResponseCache>,
        max_in_flight: usize,
    ) -> Self {
        Self {
            decompose: Cached::new(decompose, cache.clone(), max_in_flight),
            elicit: Cached::new(elicit, cache.clone(), max_in_flight),
            answer: Cached::new(answer, cache.clone(), max_in_flight),
            caption: Cached::new(caption, cache.clone(), max_in_flight),
            embed: Cached::new(embed, cache, max_in_flight),
        }
    }

    /// Fixture-driven backends with one mock generator per stage.
    pub fn mock(fixtures: Arc<Fixtures>, cache: Arc<ResponseCache>, max_in_flight: usize) -> Self {
        let dimension = fixtures.embedding_dimension;
        Self::new(
            Arc::new(MockGenerator::new("mock-decompose", fixtures.clone())),
            Arc::new(MockGenerator::new("mock-elicit", fixtures.clone())),
            Arc::new(MockGenerator::new("mock-answer", fixtures.clone())),
            Arc::new(MockCaptioner::new("mock-caption", fixtures)),
            Arc::new(MockEmbedder::new("mock-embed", dimension)),
            cache,
            max_in_flight,
        )
    }

    /// HTTP clients built from the config's endpoints.
    pub fn http(cfg: &PipelineConfig, cache: Arc<ResponseCache>) -> Result<Self, BackendError> {
        let endpoint = |value: &Option<String>, key: &str| {
            value
                .clone()
                .ok_or_else(|| BackendError::InvalidRequest(format!("{key} is not configured")))
        };
        let settings = |endpoint: String, model: &str| {
            HttpSettings::new(endpoint, model)
                .api_key(cfg.llm_api_key.clone())
                .timeout(Duration::from_secs(cfg.request_timeout_secs))
        };
        let llm = endpoint(&cfg.llm_endpoint, "llm_endpoint")?;
        let chat = |model: &str| -> Result<Arc<dyn TextGenerator>, BackendError> {
            Ok(Arc::new(ChatClient::new(settings(llm.clone(), model))?))
        };
        Ok(Self::new(
            chat(cfg.decompose_model())?,
            chat(cfg.elicit_model())?,
            chat(cfg.answer_model())?,
            Arc::new(CaptionClient::new(
                settings(endpoint(&cfg.caption_endpoint, "caption_endpoint")?, &cfg.caption_model),
                cfg.image_dir.clone(),
            )?),
            Arc::new(EmbeddingClient::new(
                settings(endpoint(&cfg.embed_endpoint, "embed_endpoint")?, &cfg.embed_model),
                cfg.embed_dimension,
                cfg.image_dir.clone(),
            )?),
            cache,
            cfg.max_in_flight,
        ))
    }

    /// Request counters keyed by stage name.
    pub fn stats(&self) -> BTreeMap<&'static str, StatsSnapshot> {
        BTreeMap::from([
            ("answer", self.answer.stats()),
            ("caption", self.caption.stats()),
            ("decompose", self.decompose.stats()),
            ("elicit", self.elicit.stats()),
            ("embed", self.embed.stats()),
        ])
    }
}

/// Every intermediate artifact produced for one question.
#[derive(Debug, Clone)]
pub struct QuestionOutcome {
    pub sub_questions: SubQuestionPair,
    pub caption: Caption,
    pub knowledge: Vec<KnowledgeItem>,
    pub answer: AnswerOutcome,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    backends: StageBackends,
    index: ExampleIndex,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, backends: StageBackends, index: ExampleIndex) -> Self {
        Self { cfg, backends, index }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn backends(&self) -> &StageBackends {
        &self.backends
    }

    async fn selected_knowledge(
        &self,
        question: &QuestionInstance,
        subs: &SubQuestionPair,
        caption: &Caption,
    ) -> Result<Vec<KnowledgeItem>> {
        if self.cfg.ablation.drops_knowledge() {
            return Ok(Vec::new());
        }
        let elicited = elicit_knowledge(subs, caption, &self.cfg, &self.backends.elicit).await?;
        let pool = gather_pool(&question.image_ref, elicited, &self.cfg, &self.backends.caption).await?;
        let image = self.backends.embed.embed_image(&question.image_ref).await?;
        Ok(rerank_top_n(&pool, &image.vector, self.cfg.n_selected_knowledge, &self.backends.embed).await?)
    }

    /// Run every stage for one question.
    pub async fn answer(&self, question: &QuestionInstance) -> Result<QuestionOutcome> {
        question.validate()?;
        let cfg = &self.cfg;
        let subs = decompose(question, cfg, &self.backends.decompose).await?;

        // Caption then knowledge (elicitation reads the caption), alongside example selection.
        let knowledge_branch = async {
            let caption = acquire_caption(&subs, &question.image_ref, cfg, &self.backends.caption).await?;
            let knowledge = self.selected_knowledge(question, &subs, &caption).await?;
            Ok::<_, Error>((caption, knowledge))
        };
        let examples_branch = async {
            Ok::<_, Error>(
                expand_example_pool(
                    question,
                    &self.index,
                    cfg.m_examples,
                    cfg.q_ensemble,
                    cfg,
                    &self.backends.embed,
                )
                .await?,
            )
        };
        let ((caption, knowledge), example_pool) = futures::try_join!(knowledge_branch, examples_branch)?;

        let answer = answer_question(
            &question.question_text,
            &caption,
            &knowledge,
            &example_pool,
            cfg,
            &self.backends.answer,
        )
        .await?;
        Ok(QuestionOutcome {
            sub_questions: subs,
            caption,
            knowledge,
            answer,
        })
    }

    pub fn record(&self, question: &QuestionInstance, outcome: &Result<QuestionOutcome>) -> EvalRecord {
        let gold = question.annotations.as_deref();
        match outcome {
            Ok(out) => {
                let mut record = EvalRecord::score(
                    question.question_id.clone(),
                    out.answer.answer.text.clone(),
                    gold,
                    self.cfg.strict_vqa_accuracy,
                );
                record.sub_questions = Some(out.sub_questions.clone());
                record.caption = (!out.caption.is_omitted()).then(|| out.caption.text.clone());
                record.knowledge = out.knowledge.iter().map(|k| k.text.clone()).collect();
                record.logprob_sum = Some(out.answer.answer.logprob_sum).filter(|s| s.is_finite());
                record
            }
            Err(err) => EvalRecord::failed(question.question_id.clone(), gold, err.to_string()),
        }
    }

    /// Answer a batch with at most `workers` questions in flight. Results are
    /// ordered by question id, independent of completion order.
    pub async fn run_batch(&self, questions: &[QuestionInstance], workers: usize) -> Vec<QuestionResult> {
        let mut results: Vec<QuestionResult> = futures::stream::iter(questions)
            .map(|q| async move {
                let outcome = self.answer(q).await;
                let record = self.record(q, &outcome);
                match &record.error {
                    None => tracing::info!(
                        question_id = %q.question_id,
                        answer = %record.predicted,
                        accuracy = ?record.accuracy,
                        "answered"
                    ),
                    Some(err) => tracing::warn!(question_id = %q.question_id, error = %err, "question failed"),
                }
                QuestionResult {
                    question_id: q.question_id.clone(),
                    bundles: outcome.map(|o| o.answer.bundles).unwrap_or_default(),
                    record,
                }
            })
            .buffer_unordered(workers.max(1))
            .collect()
            .await;
        results.sort_by(|a, b| compare_question_ids(&a.question_id, &b.question_id));
        results
    }

    /// Config fields that define the experiment, for run reports.
    pub fn settings_snapshot(&self) -> Value {
        let c = &self.cfg;
        json!({
            "n_selected_knowledge": c.n_selected_knowledge,
            "m_examples": c.m_examples,
            "q_ensemble": c.q_ensemble,
            "r_retrieved": c.r_retrieved,
            "local_caption_count": c.local_caption_count,
            "ablation": c.ablation,
            "selector_strategy": c.selector_strategy,
            "random_seed": c.random_seed,
            "decompose_model": c.decompose_model(),
            "elicit_model": c.elicit_model(),
            "answer_model": c.answer_model(),
            "caption_model": c.caption_model,
            "embed_model": c.embed_model,
            "length_normalize": c.length_normalize,
            "strict_vqa_accuracy": c.strict_vqa_accuracy,
            "example_count": self.index.len(),
        })
    }

    pub fn report(&self, results: &[QuestionResult]) -> RunReport {
        let records: Vec<EvalRecord> = results.iter().map(|r| r.record.clone()).collect();
        aggregate(&records, self.cfg.ablation.label(), self.settings_snapshot())
    }
}

#[derive(Debug, Clone)]
pub struct QuestionResult {
    pub question_id: String,
    pub record: EvalRecord,
    /// Answering prompts, one per ensemble group (empty on failure).
    pub bundles: Vec<PromptBundle>,
}

/// Layout of a run directory.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.json";
    pub const REPORT: &'static str = "report.json";
    pub const AUDIT: &'static str = "audit.jsonl";
    pub const PREDICTIONS: &'static str = "predictions.json";
    pub const STATS: &'static str = "stats.json";
    pub const TRACES: &'static str = "traces";

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| Error::Io {
            path: root.display().to_string(),
            source,
        })?;
        Ok(Self { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn write(&self, name: &str, body: impl AsRef<[u8]>) -> Result<()> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        std::fs::write(&path, body).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value).expect("run outputs serialize");
        body.push('\n');
        self.write(name, body)
    }

    /// Write config snapshot, report, audit log, predictions, and optional traces.
    pub fn write_run(
        &self,
        cfg: &PipelineConfig,
        report: &RunReport,
        results: &[QuestionResult],
        trace: bool,
    ) -> Result<()> {
        self.write_json(Self::CONFIG, &cfg.redacted())?;
        self.write_json(Self::REPORT, report)?;
        let mut audit = String::new();
        for r in results {
            audit.push_str(&serde_json::to_string(&r.record).expect("records serialize"));
            audit.push('\n');
        }
        self.write(Self::AUDIT, audit)?;
        let predictions: BTreeMap<&str, &str> = results
            .iter()
            .filter(|r| r.record.error.is_none())
            .map(|r| (r.question_id.as_str(), r.record.predicted.as_str()))
            .collect();
        self.write_json(Self::PREDICTIONS, &predictions)?;
        if trace {
            for r in results {
                for (group, bundle) in r.bundles.iter().enumerate() {
                    let name = format!("{}/{}.group{group}.json", Self::TRACES, file_safe(&r.question_id));
                    self.write_json(&name, bundle)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_stats(&self, stats: &BTreeMap<&'static str, StatsSnapshot>) -> Result<()> {
        self.write_json(Self::STATS, stats)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
