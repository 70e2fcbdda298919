//! Quality gates for paraphrase variants: placeholder count and contextual
//! similarity to the masked original.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{Endpoint, LlmError};
use crate::mask::{self, MaskedTemplate};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("cannot embed an empty string")]
    EmptyInput,
    #[error("embedder returned {found} vectors for {expected} inputs")]
    Count { found: usize, expected: usize },
    #[error("embedding vectors differ in length")]
    Dimension,
    #[error(transparent)]
    Remote(#[from] LlmError),
}

/// Maps a batch of texts to vectors of a common dimension.
pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Lower-cased term-frequency vectors over the batch vocabulary.
///
/// Terms are maximal alphanumeric runs; `<<...>>` placeholders are removed
/// first. The vocabulary is sorted so results do not depend on batch order.
#[derive(Debug, Clone, Copy, Default)]
pub struct TfEmbedder;

fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

impl Embedder for TfEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let counts: Vec<BTreeMap<String, f64>> = texts
            .iter()
            .map(|t| {
                let stripped = mask::strip_placeholders(t);
                let mut m = BTreeMap::new();
                for term in terms(&stripped) {
                    *m.entry(term).or_insert(0.0) += 1.0;
                }
                m
            })
            .collect();
        let mut vocab: BTreeMap<&str, usize> = BTreeMap::new();
        for m in &counts {
            for k in m.keys() {
                vocab.entry(k.as_str()).or_insert(0);
            }
        }
        for (i, slot) in vocab.values_mut().enumerate() {
            *slot = i;
        }
        Ok(counts
            .iter()
            .map(|m| {
                let mut v = vec![0.0; vocab.len()];
                for (k, c) in m {
                    v[vocab[k.as_str()]] = *c;
                }
                v
            })
            .collect())
    }
}

/// OpenAI-compatible `POST {base}/embeddings`.
///
/// Accepts replies shaped `{"vectors": [[..]]}` or `{"data": [{"embedding": [..]}]}`.
#[derive(Debug, Clone)]
pub struct RemoteEmbedder {
    pub endpoint: Endpoint,
    pub model: Option<String>,
}

impl RemoteEmbedder {
    pub fn parse_reply(body: &Value) -> Result<Vec<Vec<f64>>, EmbedError> {
        let to_vec = |v: &Value| -> Option<Vec<f64>> {
            v.as_array()?.iter().map(Value::as_f64).collect()
        };
        let vectors = if let Some(vs) = body.get("vectors").and_then(Value::as_array) {
            vs.iter().map(to_vec).collect::<Option<Vec<_>>>()
        } else if let Some(data) = body.get("data").and_then(Value::as_array) {
            data.iter()
                .map(|d| d.get("embedding").and_then(to_vec))
                .collect::<Option<Vec<_>>>()
        } else {
            None
        };
        vectors.ok_or_else(|| {
            EmbedError::Remote(LlmError::Protocol("no vectors in embedding reply".into()))
        })
    }
}

impl Embedder for RemoteEmbedder {
    fn embed(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let mut body = json!({ "input": texts });
        if let Some(model) = &self.model {
            body["model"] = json!(model);
        }
        let reply = self.endpoint.post_json("embeddings", &body)?;
        Self::parse_reply(&reply)
    }
}

/// Cosine similarity clamped to `[0, 1]`. Two zero vectors count as identical.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(0.0, 1.0)
}

pub fn semantic_similarity(
    original: &str,
    variant: &str,
    embedder: &dyn Embedder,
) -> Result<f64, EmbedError> {
    if original.trim().is_empty() || variant.trim().is_empty() {
        return Err(EmbedError::EmptyInput);
    }
    let vectors = embedder.embed(&[original, variant])?;
    if vectors.len() != 2 {
        return Err(EmbedError::Count {
            found: vectors.len(),
            expected: 2,
        });
    }
    if vectors[0].len() != vectors[1].len() {
        return Err(EmbedError::Dimension);
    }
    Ok(cosine(&vectors[0], &vectors[1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagCount {
    pub ok: bool,
    pub found: usize,
}

/// Placeholder count equals the entity count and every label is known.
pub fn check_tag_count(template: &MaskedTemplate, variant_text: &str) -> TagCount {
    let found = mask::scan_placeholders(variant_text);
    let known = found.iter().all(|p| template.has_label(&p.label));
    TagCount {
        ok: known && found.len() == template.entities.len(),
        found: found.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    /// Tag gate failed: regenerate.
    Retry,
    /// Tags intact, similarity too low; positional re-mapping was enabled.
    Fallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub similarity_threshold: f64,
    pub positional_fallback: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            similarity_threshold: 0.80,
            positional_fallback: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub tag_count_ok: bool,
    pub found_tags: usize,
    pub similarity: f64,
    pub similarity_ok: bool,
    pub verdict: Verdict,
}

/// Runs both gates. Similarity compares the masked original with the masked
/// variant, so entity surfaces never inflate the score. The embedder is not
/// called when the tag gate already failed.
pub fn validate_variant(
    template: &MaskedTemplate,
    variant_text: &str,
    config: &GateConfig,
    embedder: &dyn Embedder,
) -> Result<ValidationOutcome, EmbedError> {
    let tags = check_tag_count(template, variant_text);
    if !tags.ok {
        return Ok(ValidationOutcome {
            tag_count_ok: false,
            found_tags: tags.found,
            similarity: 0.0,
            similarity_ok: false,
            verdict: Verdict::Retry,
        });
    }
    let similarity =
        semantic_similarity(&mask::render_template(template), variant_text, embedder)?;
    let similarity_ok = similarity >= config.similarity_threshold;
    let verdict = match (similarity_ok, config.positional_fallback) {
        (true, _) => Verdict::Accept,
        (false, true) => Verdict::Fallback,
        (false, false) => Verdict::Retry,
    };
    Ok(ValidationOutcome {
        tag_count_ok: true,
        found_tags: tags.found,
        similarity,
        similarity_ok,
        verdict,
    })
}
