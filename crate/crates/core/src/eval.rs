//! Dataset loading, answer normalization, VQA accuracy, and run reports.
//!
//! Accuracy is `min(matches / 3, 1)` over exact matches of the normalized
//! prediction against the normalized gold answers. The strict variant averages
//! that score over the leave-one-annotator-out subsets.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::types::{QuestionInstance, SubQuestionPair};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed record in {path}: {message}")]
    Malformed { path: String, message: String },
    #[error("duplicate question_id {question_id} in {path}")]
    DuplicateId { path: String, question_id: String },
    #[error("gold answer list is empty")]
    EmptyGold,
    #[error("predictions are missing {} of {total} annotated ids (allowed fraction {allowed}): {}", missing.len(), missing.join(", "))]
    Coverage {
        missing: Vec<String>,
        total: usize,
        allowed: f64,
    },
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const NUMBER_WORDS: [(&str, &str); 11] = [
    ("zero", "0"),
    ("one", "1"),
    ("two", "2"),
    ("three", "3"),
    ("four", "4"),
    ("five", "5"),
    ("six", "6"),
    ("seven", "7"),
    ("eight", "8"),
    ("nine", "9"),
    ("ten", "10"),
];
const PUNCTUATION: [char; 10] = ['.', ',', '?', '!', '\'', '"', ';', ':', '(', ')'];

pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !PUNCTUATION.contains(c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .map(|w| {
            NUMBER_WORDS
                .iter()
                .find(|(word, _)| *word == w)
                .map_or(w, |(_, digit)| digit)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn vqa_accuracy(predicted_norm: &str, gold_norm: &[String]) -> Result<f64, EvalError> {
    if gold_norm.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let matches = gold_norm.iter().filter(|g| *g == predicted_norm).count();
    Ok((matches as f64 / 3.0).min(1.0))
}

/// Mean accuracy over every subset that leaves one annotator out.
pub fn vqa_accuracy_strict(predicted_norm: &str, gold_norm: &[String]) -> Result<f64, EvalError> {
    if gold_norm.len() < 2 {
        return vqa_accuracy(predicted_norm, gold_norm);
    }
    let matches = gold_norm.iter().filter(|g| *g == predicted_norm).count();
    let total: f64 = gold_norm
        .iter()
        .map(|g| {
            let kept = matches - usize::from(g == predicted_norm);
            (kept as f64 / 3.0).min(1.0)
        })
        .sum();
    Ok(total / gold_norm.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub question_id: String,
    pub predicted: String,
    pub predicted_norm: String,
    pub gold_norm: Vec<String>,
    /// `None` when the question carries no annotations.
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_questions: Option<SubQuestionPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub knowledge: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_sum: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EvalRecord {
    /// Score a raw prediction against raw gold answers.
    pub fn score(
        question_id: impl Into<String>,
        predicted: impl Into<String>,
        gold: Option<&[String]>,
        strict: bool,
    ) -> Self {
        let predicted = predicted.into();
        let predicted_norm = normalize_answer(&predicted);
        let gold_norm: Vec<String> = gold.unwrap_or_default().iter().map(|g| normalize_answer(g)).collect();
        let accuracy = if gold_norm.is_empty() {
            None
        } else if strict {
            vqa_accuracy_strict(&predicted_norm, &gold_norm).ok()
        } else {
            vqa_accuracy(&predicted_norm, &gold_norm).ok()
        };
        Self {
            question_id: question_id.into(),
            predicted,
            predicted_norm,
            gold_norm,
            accuracy,
            sub_questions: None,
            caption: None,
            knowledge: Vec::new(),
            logprob_sum: None,
            error: None,
        }
    }

    /// A question the pipeline could not answer: scored 0 when gradable.
    pub fn failed(question_id: impl Into<String>, gold: Option<&[String]>, error: impl Into<String>) -> Self {
        let mut record = Self::score(question_id, "", gold, false);
        if record.accuracy.is_some() {
            record.accuracy = Some(0.0);
        }
        record.error = Some(error.into());
        record
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Mean accuracy in percent, one decimal; `None` with nothing to score.
    pub accuracy: Option<f64>,
    pub count: usize,
    pub scored: usize,
    pub failed: usize,
    pub ablation: String,
    pub decomposition_fallback_rate: Option<f64>,
    pub config: Value,
}

pub fn round_percent(mean: f64) -> f64 {
    (mean * 1000.0).round() / 10.0
}

pub fn aggregate(records: &[EvalRecord], ablation: &str, config: Value) -> RunReport {
    let scored: Vec<f64> = records.iter().filter_map(|r| r.accuracy).collect();
    let accuracy = (!scored.is_empty()).then(|| round_percent(scored.iter().sum::<f64>() / scored.len() as f64));
    let decomposed: Vec<&SubQuestionPair> = records.iter().filter_map(|r| r.sub_questions.as_ref()).collect();
    let decomposition_fallback_rate = (!decomposed.is_empty())
        .then(|| decomposed.iter().filter(|p| p.is_fallback()).count() as f64 / decomposed.len() as f64);
    RunReport {
        accuracy,
        count: records.len(),
        scored: scored.len(),
        failed: records.iter().filter(|r| r.error.is_some()).count(),
        ablation: ablation.to_string(),
        decomposition_fallback_rate,
        config,
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Id {
    Num(i64),
    Str(String),
}

impl From<Id> for String {
    fn from(id: Id) -> Self {
        match id {
            Id::Num(n) => n.to_string(),
            Id::Str(s) => s,
        }
    }
}

#[derive(Debug, Deserialize)]
struct QuestionRecord {
    question_id: Id,
    image_id: Id,
    question: String,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum AnswerEntry {
    Object { answer: String },
    Plain(String),
}

#[derive(Debug, Deserialize)]
struct AnnotationRecord {
    question_id: Id,
    #[serde(alias = "direct_answers")]
    answers: Vec<AnswerEntry>,
}

fn read_json(path: &Path) -> Result<Value, EvalError> {
    let body = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&body).map_err(|e| EvalError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Accept either a bare array or the VQA wrapper object `{"<field>": [...]}`.
fn records<T: serde::de::DeserializeOwned>(path: &Path, field: &str) -> Result<Vec<T>, EvalError> {
    let value = read_json(path)?;
    let list = match value {
        Value::Object(mut obj) => obj.remove(field).ok_or_else(|| EvalError::Malformed {
            path: path.display().to_string(),
            message: format!("expected an array or an object with `{field}`"),
        })?,
        other => other,
    };
    let Value::Array(items) = list else {
        return Err(EvalError::Malformed {
            path: path.display().to_string(),
            message: format!("`{field}` is not an array"),
        });
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| {
            serde_json::from_value(item).map_err(|e| EvalError::Malformed {
                path: path.display().to_string(),
                message: format!("record {i}: {e}"),
            })
        })
        .collect()
}

/// Gold answers keyed by question id.
pub fn load_annotations(path: &Path) -> Result<BTreeMap<String, Vec<String>>, EvalError> {
    let mut out = BTreeMap::new();
    for rec in records::<AnnotationRecord>(path, "annotations")? {
        let id: String = rec.question_id.into();
        let answers: Vec<String> = rec
            .answers
            .into_iter()
            .map(|a| match a {
                AnswerEntry::Object { answer } | AnswerEntry::Plain(answer) => answer,
            })
            .collect();
        if answers.is_empty() {
            return Err(EvalError::Malformed {
                path: path.display().to_string(),
                message: format!("question {id} has no answers"),
            });
        }
        if out.insert(id.clone(), answers).is_some() {
            return Err(EvalError::DuplicateId {
                path: path.display().to_string(),
                question_id: id,
            });
        }
    }
    Ok(out)
}

pub fn load_dataset(questions_path: &Path, annotations_path: Option<&Path>) -> Result<Vec<QuestionInstance>, EvalError> {
    let annotations = match annotations_path {
        Some(p) => load_annotations(p)?,
        None => BTreeMap::new(),
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for rec in records::<QuestionRecord>(questions_path, "questions")? {
        let id: String = rec.question_id.into();
        if !seen.insert(id.clone()) {
            return Err(EvalError::DuplicateId {
                path: questions_path.display().to_string(),
                question_id: id,
            });
        }
        let gold = annotations.get(&id).cloned();
        if gold.is_none() && annotations_path.is_some() {
            tracing::warn!(question_id = %id, "no annotations for question; loaded for prediction only");
        }
        let instance = QuestionInstance::new(id.clone(), rec.question, String::from(rec.image_id), gold).map_err(|e| {
            EvalError::Malformed {
                path: questions_path.display().to_string(),
                message: format!("question {id}: {e}"),
            }
        })?;
        out.push(instance);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    question_id: Id,
    answer: String,
}

/// Predictions as `{question_id: answer}` or `[{question_id, answer}]`.
pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>, EvalError> {
    let malformed = |message: String| EvalError::Malformed {
        path: path.display().to_string(),
        message,
    };
    match read_json(path)? {
        Value::Object(map) => map
            .into_iter()
            .map(|(k, v)| match v {
                Value::String(s) => Ok((k, s)),
                other => Err(malformed(format!("prediction for {k} is not a string: {other}"))),
            })
            .collect(),
        Value::Array(items) => {
            let mut out = BTreeMap::new();
            for (i, item) in items.into_iter().enumerate() {
                let rec: PredictionRecord =
                    serde_json::from_value(item).map_err(|e| malformed(format!("record {i}: {e}")))?;
                out.insert(rec.question_id.into(), rec.answer);
            }
            Ok(out)
        }
        _ => Err(malformed("expected an object or an array".into())),
    }
}

/// Score predictions against gold answers. Fails if more than
/// `max_missing_fraction` of annotated ids lack a prediction; missing ids
/// within the allowance score 0.
pub fn score_predictions(
    predictions: &BTreeMap<String, String>,
    gold: &BTreeMap<String, Vec<String>>,
    max_missing_fraction: f64,
    strict: bool,
) -> Result<Vec<EvalRecord>, EvalError> {
    let missing: Vec<String> = gold.keys().filter(|id| !predictions.contains_key(*id)).cloned().collect();
    if !gold.is_empty() && missing.len() as f64 / gold.len() as f64 > max_missing_fraction {
        return Err(EvalError::Coverage {
            missing,
            total: gold.len(),
            allowed: max_missing_fraction,
        });
    }
    let extra = predictions.keys().filter(|id| !gold.contains_key(*id)).count();
    if extra > 0 {
        tracing::warn!(extra, "predictions for ids without annotations are ignored");
    }
    Ok(gold
        .iter()
        .map(|(id, answers)| match predictions.get(id) {
            Some(p) => EvalRecord::score(id.clone(), p.clone(), Some(answers), strict),
            None => EvalRecord::failed(id.clone(), Some(answers), "missing prediction"),
        })
        .collect())
}

/// Integer ids first in numeric order, then the rest lexicographically.
pub fn compare_question_ids(a: &str, b: &str) -> std::cmp::Ordering {
    let key = |s: &str| (s.parse::<u64>().map_or((1, 0), |n| (0, n)), s.to_string());
    key(a).cmp(&key(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gold(matching: usize, total: usize) -> Vec<String> {
        (0..total)
            .map(|i| if i < matching { "dog".to_string() } else { format!("other{i}") })
            .collect()
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("The Red Panda!"), "red panda");
        assert_eq!(normalize_answer("two"), "2");
        assert_eq!(normalize_answer("  An   apple, (sliced)  "), "apple sliced");
        assert_eq!(normalize_answer("a"), "");
        assert_eq!(normalize_answer("Ten dogs"), "10 dogs");
        assert_eq!(normalize_answer("eleven"), "eleven");
        assert_eq!(normalize_answer("it's \"fine\"; ok: yes?"), "its fine ok yes");
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "[ a-zA-Z0-9.,?!'\";:()]{0,40}|(the|an|a|one|two|ten|Dog|,| |\\.){0,12}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once);
        }

        #[test]
        fn accuracy_case_insensitive(word in "[a-z]{1,8}") {
            let gold: Vec<String> = vec![normalize_answer(&word); 3];
            prop_assert_eq!(
                vqa_accuracy(&normalize_answer(&word.to_uppercase()), &gold).unwrap(),
                vqa_accuracy(&normalize_answer(&word), &gold).unwrap()
            );
        }
    }

    #[test]
    fn accuracy_formula() {
        assert_eq!(vqa_accuracy("dog", &gold(5, 10)).unwrap(), 1.0);
        assert!((vqa_accuracy("dog", &gold(2, 10)).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(vqa_accuracy("dog", &gold(0, 10)).unwrap(), 0.0);
        assert!(matches!(vqa_accuracy("dog", &[]), Err(EvalError::EmptyGold)));
        let mut last = 0.0;
        for m in 0..=10 {
            let acc = vqa_accuracy("dog", &gold(m, 10)).unwrap();
            assert!(acc >= last);
            last = acc;
        }
    }

    #[test]
    fn strict_accuracy_leave_one_out() {
        // 3 matches of 10: leaving out a match (3 ways) gives 2/3, otherwise 1.
        let expected = (3.0 * (2.0 / 3.0) + 7.0) / 10.0;
        assert!((vqa_accuracy_strict("dog", &gold(3, 10)).unwrap() - expected).abs() < 1e-12);
        assert_eq!(vqa_accuracy_strict("dog", &gold(4, 10)).unwrap(), 1.0);
        assert_eq!(vqa_accuracy_strict("dog", &gold(0, 10)).unwrap(), 0.0);
    }

    fn rec(acc: f64) -> EvalRecord {
        EvalRecord {
            accuracy: Some(acc),
            ..EvalRecord::score("1", "x", None, false)
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[rec(1.0), rec(0.0), rec(1.0), rec(1.0)], "none", Value::Null);
        assert_eq!(r.accuracy, Some(75.0));
        assert_eq!(r.count, 4);
        let empty = aggregate(&[], "none", Value::Null);
        assert_eq!(empty.count, 0);
        assert_eq!(empty.accuracy, None);
        let r = aggregate(&[rec(1.0), rec(2.0 / 3.0), rec(0.0)], "none", Value::Null);
        assert_eq!(r.accuracy, Some(55.6));
        let reversed = aggregate(&[rec(0.0), rec(2.0 / 3.0), rec(1.0)], "none", Value::Null);
        assert_eq!(reversed.accuracy, r.accuracy);
    }

    #[test]
    fn failed_record_scores_zero() {
        let gold = vec!["dog".to_string()];
        let r = EvalRecord::failed("7", Some(&gold), "boom");
        assert_eq!(r.accuracy, Some(0.0));
        assert_eq!(r.error.as_deref(), Some("boom"));
        assert_eq!(EvalRecord::failed("7", None, "boom").accuracy, None);
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn dataset_join_and_partial_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(
            dir.path(),
            "q.json",
            r#"{"questions": [
                {"question_id": 1, "image_id": 42, "question": "What is this?"},
                {"question_id": 2, "image_id": 43, "question": "Who made it?"}
            ]}"#,
        );
        let a = write(
            dir.path(),
            "a.json",
            r#"{"annotations": [{"question_id": 1, "answers": [{"answer": "dog", "answer_id": 1}, {"answer": "puppy"}]}]}"#,
        );
        let ds = load_dataset(&q, Some(&a)).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].question_id, "1");
        assert_eq!(ds[0].image_ref, "42");
        assert_eq!(ds[0].annotations.as_deref(), Some(&["dog".to_string(), "puppy".to_string()][..]));
        assert!(ds[1].annotations.is_none());
    }

    #[test]
    fn dataset_rejects_duplicates_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let q = write(
            dir.path(),
            "q.json",
            r#"[{"question_id": "1", "image_id": "a", "question": "x?"}, {"question_id": "1", "image_id": "b", "question": "y?"}]"#,
        );
        assert!(matches!(load_dataset(&q, None), Err(EvalError::DuplicateId { .. })));
        let bad = write(dir.path(), "bad.json", r#"[{"question_id": "1"}]"#);
        assert!(matches!(load_dataset(&bad, None), Err(EvalError::Malformed { .. })));
    }

    #[test]
    fn predictions_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let obj = write(dir.path(), "p1.json", r#"{"1": "dog", "2": "cat"}"#);
        let arr = write(dir.path(), "p2.json", r#"[{"question_id": 1, "answer": "dog"}, {"question_id": 2, "answer": "cat"}]"#);
        assert_eq!(load_predictions(&obj).unwrap(), load_predictions(&arr).unwrap());
    }

    #[test]
    fn coverage_check() {
        let gold: BTreeMap<String, Vec<String>> =
            (0..4).map(|i| (i.to_string(), vec!["dog".to_string()])).collect();
        let full: BTreeMap<String, String> = (0..4).map(|i| (i.to_string(), "dog".to_string())).collect();
        let records = score_predictions(&full, &gold, 0.05, false).unwrap();
        assert!(records.iter().all(|r| r.accuracy == Some(1.0 / 3.0)));
        let half: BTreeMap<String, String> = (0..2).map(|i| (i.to_string(), "dog".to_string())).collect();
        match score_predictions(&half, &gold, 0.05, false) {
            Err(EvalError::Coverage { missing, .. }) => assert_eq!(missing, ["2", "3"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn id_ordering() {
        let mut ids = vec!["10", "2", "b", "1a", "1", "a"];
        ids.sort_by(|a, b| compare_question_ids(a, b));
        assert_eq!(ids, ["1", "2", "10", "1a", "a", "b"]);
    }
}
