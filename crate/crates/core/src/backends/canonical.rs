//! Canonical request serialization and cache-key digests.
//!
//! Canonical form: JSON with object keys sorted lexicographically by byte
//! value, UTF-8, no insignificant whitespace.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::GenerationRequest;

/// Every request shape a backend answers, in the form that gets hashed.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum BackendRequest<'a> {
    Generate(&'a GenerationRequest),
    Caption { image_ref: &'a str, prompt: &'a str },
    LocalCaptions { image_ref: &'a str, count: usize },
    EmbedText { text: &'a str },
    EmbedImage { image_ref: &'a str },
}

impl BackendRequest<'_> {
    pub fn canonical(&self) -> String {
        canonical_json(&serde_json::to_value(self).expect("requests serialize"))
    }
}

pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_value(value, &mut out);
    out
}

fn write_value(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push('{');
            for (i, (key, val)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_value(val, out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// Hex SHA-256 of `backend_id || request_canonical`.
pub fn request_digest(backend_id: &str, request_canonical: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend_id.as_bytes());
    hasher.update(request_canonical.as_bytes());
    hex::encode(hasher.finalize())
}
