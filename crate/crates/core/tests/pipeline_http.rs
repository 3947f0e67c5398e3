use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use dka_core::backends::ResponseCache;
use dka_core::eval::load_predictions;
use dka_core::rank::ExampleIndex;
use dka_core::{IcExample, Pipeline, PipelineConfig, QuestionInstance, RunDir, StageBackends};

const QUESTION: &str = "What animal has similar color to the flower in the image?";

#[derive(Clone, Default)]
struct Hits(Arc<AtomicUsize>);

fn reply(text: &str, logprobs: &[f64]) -> Value {
    let tokens: Vec<Value> = logprobs.iter().map(|lp| json!({"token": "t", "logprob": lp})).collect();
    json!({"message": {"content": text}, "logprobs": {"content": tokens}})
}

/// A stand-in model server: routes on what the prompt asks for.
async fn chat(State(hits): State<Hits>, Json(body): Json<Value>) -> Json<Value> {
    hits.0.fetch_add(1, Ordering::SeqCst);
    let content = &body["messages"][0]["content"];
    if let Some(parts) = content.as_array() {
        let prompt = parts[0]["text"].as_str().unwrap();
        let n = body["n"].as_u64().unwrap_or(1);
        let choices: Vec<Value> = (0..n)
            .map(|i| {
                let text = if n > 1 {
                    format!("region {i} of the garden")
                } else if prompt.contains("color of the flower") {
                    "a pink flower in a garden".to_string()
                } else {
                    "a garden".to_string()
                };
                reply(&text, &[])
            })
            .collect();
        return Json(json!({"choices": choices}));
    }
    let prompt = content.as_str().unwrap();
    let choice = if prompt.contains("decouple the question") {
        reply(
            r#"Sure. {"Image-based sub-question": "What's the color of the flower?", "Knowledge-based sub-question": "Which animal has a similar color?"}"#,
            &[],
        )
    } else if prompt.contains("short factual statements") {
        let list: Vec<String> = (1..=10).map(|i| format!("{i}. pink animal fact number {i}")).collect();
        reply(&list.join("\n"), &[])
    } else if prompt.contains("Answer: answer 0\n") {
        reply("flamingo", &[-0.1, -0.1])
    } else {
        reply("pig", &[-1.0, -1.0])
    };
    Json(json!({"choices": [choice]}))
}

async fn embed(State(hits): State<Hits>, Json(body): Json<Value>) -> Json<Value> {
    hits.0.fetch_add(1, Ordering::SeqCst);
    let input = body["input"][0].as_str().unwrap();
    let mut v = vec![1.0; 8];
    for (i, b) in input.bytes().enumerate() {
        v[i % 8] += f64::from(b) / 255.0;
    }
    Json(json!({"data": [{"embedding": v}]}))
}

async fn serve(hits: Hits) -> String {
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .route("/v1/embeddings", post(embed))
        .with_state(hits);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}/v1")
}

fn index() -> ExampleIndex {
    let examples = (0..12)
        .map(|i| IcExample {
            question_text: format!("Example question {i}?"),
            caption_text: format!("example caption {i}"),
            answer_text: format!("answer {i}"),
            question_embedding: (0..8).map(|d| 1.0 + ((i * 7 + d) % 5) as f64).collect(),
            image_embedding: (0..8).map(|d| 1.0 + ((i * 3 + d) % 4) as f64).collect(),
        })
        .collect();
    ExampleIndex::new(examples, "inline").unwrap()
}

fn config(base: &str) -> PipelineConfig {
    PipelineConfig {
        llm_endpoint: Some(format!("{base}/chat/completions")),
        caption_endpoint: Some(format!("{base}/chat/completions")),
        embed_endpoint: Some(format!("{base}/embeddings")),
        local_caption_count: 4,
        ..Default::default()
    }
}

fn questions() -> Vec<QuestionInstance> {
    vec![
        QuestionInstance::new("1", QUESTION, "https://example.com/flower.jpg", Some(vec!["flamingo".into(); 10])).unwrap(),
        QuestionInstance::new("2", "What is in the garden?", "https://example.com/garden.jpg", Some(vec!["pig".into()])).unwrap(),
    ]
}

#[tokio::test]
async fn pipeline_over_http_with_disk_cache() {
    let hits = Hits::default();
    let base = serve(hits.clone()).await;
    let cfg = config(&base);
    cfg.validate(dka_core::config::EndpointPolicy::Required).unwrap();
    let cache_dir = tempfile::tempdir().unwrap();

    let cache = Arc::new(ResponseCache::on_disk(cache_dir.path()).unwrap());
    let pipeline = Pipeline::new(cfg.clone(), StageBackends::http(&cfg, cache).unwrap(), index());
    let results = pipeline.run_batch(&questions(), 2).await;
    let report = pipeline.report(&results);
    assert_eq!(report.failed, 0, "{:?}", results.iter().map(|r| &r.record.error).collect::<Vec<_>>());

    let first = &results[0];
    assert_eq!(first.record.predicted, "flamingo");
    assert_eq!(first.record.accuracy, Some(1.0));
    assert_eq!(first.record.caption.as_deref(), Some("a pink flower in a garden"));
    assert_eq!(first.record.knowledge.len(), 9);
    assert_eq!(first.bundles.len(), 5);
    // Ten elicited statements plus four local captions compete for nine slots.
    for b in &first.bundles {
        assert!(b.prompt_text.contains("Context: a pink flower in a garden\nKnowledge: "));
        assert!(b.prompt_text.ends_with(&format!("Question: {QUESTION}\nAnswer:")));
    }
    let live_calls = hits.0.load(Ordering::SeqCst);
    assert!(live_calls > 0);

    // A fresh pipeline over the same cache directory never reaches the server.
    let cache = Arc::new(ResponseCache::on_disk(cache_dir.path()).unwrap());
    let again = Pipeline::new(cfg.clone(), StageBackends::http(&cfg, cache).unwrap(), index());
    let rerun = again.run_batch(&questions(), 1).await;
    assert_eq!(hits.0.load(Ordering::SeqCst), live_calls, "rerun reached the server");
    assert_eq!(again.report(&rerun), report);
    for stats in again.backends().stats().values() {
        assert_eq!(stats.invocations, 0);
        assert_eq!(stats.cache_hits, stats.requests);
    }

    let out = tempfile::tempdir().unwrap();
    let run_dir = RunDir::create(out.path()).unwrap();
    run_dir.write_run(&cfg, &report, &results, true).unwrap();
    run_dir.write_stats(&pipeline.backends().stats()).unwrap();
    let predictions = load_predictions(&run_dir.path(RunDir::PREDICTIONS)).unwrap();
    assert_eq!(predictions["1"], "flamingo");
    assert_eq!(predictions.len(), 2);
    let audit = std::fs::read_to_string(run_dir.path(RunDir::AUDIT)).unwrap();
    assert_eq!(audit.lines().count(), 2);
    assert_eq!(std::fs::read_dir(run_dir.path(RunDir::TRACES)).unwrap().count(), 10);
    let snapshot: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.path(RunDir::CONFIG)).unwrap()).unwrap();
    assert_eq!(snapshot["n_selected_knowledge"], 9);
}

#[tokio::test]
async fn unreachable_backends_fail_questions_not_the_batch() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    drop(listener);
    let cfg = PipelineConfig {
        request_timeout_secs: 2,
        ..config(&base)
    };
    let backends = StageBackends::http(&cfg, Arc::new(ResponseCache::in_memory())).unwrap();
    let pipeline = Pipeline::new(cfg, backends, index());
    let results = pipeline.run_batch(&questions()[..1], 1).await;
    assert_eq!(results.len(), 1);
    assert_eq!(results[0].record.accuracy, Some(0.0));
    assert!(results[0].record.error.as_deref().unwrap().contains("chat:"));
}
