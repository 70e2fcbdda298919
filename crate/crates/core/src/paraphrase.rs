//! Entity-preserving paraphrase augmentation.
//!
//! Each sentence is masked, sent to a chat model with the paraphrasing prompt,
//! and every returned variant has to pass the validation gates before its
//! entities are re-injected. Missing variants are regenerated at the next
//! temperature of the schedule until the retry budget runs out.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::AnnotatedSentence;
use crate::llm::{LlmClient, LlmRequest};
use crate::mask::{self, MaskedTemplate};
use crate::validate::{self, Embedder, GateConfig, Verdict};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("n_variants must be at least 1")]
    NoVariants,
    #[error("temperature schedule has {len} entries but max_retries={max_retries} needs {needed}")]
    ShortSchedule {
        len: usize,
        max_retries: u32,
        needed: usize,
    },
    #[error("similarity threshold {0} is outside [0, 1]")]
    Threshold(f64),
    #[error("max_parallel_requests must be at least 1")]
    NoParallelism,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regeneration {
    /// Ask only for the variants still missing.
    #[default]
    Shortfall,
    /// Discard accepted variants and ask for the full set again.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParaphraseConfig {
    pub n_variants: usize,
    pub max_retries: u32,
    pub temperature_schedule: Vec<f64>,
    pub similarity_threshold: f64,
    pub positional_fallback: bool,
    pub regeneration: Regeneration,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    pub max_parallel_requests: usize,
    pub model: String,
    pub max_tokens: Option<u32>,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

impl Default for ParaphraseConfig {
    fn default() -> Self {
        Self {
            n_variants: 2,
            max_retries: 2,
            temperature_schedule: vec![0.7, 1.0, 1.2],
            similarity_threshold: 0.80,
            positional_fallback: true,
            regeneration: Regeneration::Shortfall,
            request_timeout: Duration::from_secs(60),
            max_parallel_requests: 4,
            model: "llama-3.3-70b-instruct".into(),
            max_tokens: Some(1024),
        }
    }
}

impl ParaphraseConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_variants == 0 {
            return Err(ConfigError::NoVariants);
        }
        let needed = self.max_retries as usize + 1;
        if self.temperature_schedule.len() < needed {
            return Err(ConfigError::ShortSchedule {
                len: self.temperature_schedule.len(),
                max_retries: self.max_retries,
                needed,
            });
        }
        if !(0.0..=1.0).contains(&self.similarity_threshold) {
            return Err(ConfigError::Threshold(self.similarity_threshold));
        }
        if self.max_parallel_requests == 0 {
            return Err(ConfigError::NoParallelism);
        }
        Ok(())
    }

    pub fn gate(&self) -> GateConfig {
        GateConfig {
            similarity_threshold: self.similarity_threshold,
            positional_fallback: self.positional_fallback,
        }
    }
}

/// The paraphrasing prompt with the variant count and original sentence filled in.
pub fn build_paraphrase_prompt(template_text: &str, n_variants: usize) -> String {
    format!(
        "Task Description:\n\
You are a helpful assistant. I have a sentence with certain entities that I want to preserve in spirit, but you may modify the sentence slightly to add variety. Your task is:\n\
1. Read the Original Sentence provided.\n\
2. Create {n_variants} new sentences (variants) that:\n\
- DO NOT MODIFY any word enclosed in <<>> tags or move them around (do not introduce any new <<>> tags that weren't in the original).\n\
- May adjust phrasing, structure, or add contextual details while maintaining logical coherence and meaning.\n\
- Minor modifications are allowed, but retain the core entity references and do not transform them into something else.\n\
3. Return the output in a valid JSON format with the generated variants.\n\
Original Sentence: {template_text}"
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VariantParseError {
    #[error("response is not valid JSON: {0}")]
    Parse(String),
    #[error("response has {found} variants, expected {expected}")]
    Count { found: usize, expected: usize },
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    // Drop the info string (```json) up to the first newline.
    let rest = match rest.find('\n') {
        Some(nl) => &rest[nl + 1..],
        None => rest.trim_start_matches(|c: char| c.is_ascii_alphabetic()),
    };
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

/// Accepts `{"variants": [..]}` or a bare array of strings, optionally fenced.
pub fn parse_variants(response_text: &str, expected: usize) -> Result<Vec<String>, VariantParseError> {
    let body = strip_code_fence(response_text);
    let value: Value =
        serde_json::from_str(body).map_err(|e| VariantParseError::Parse(e.to_string()))?;
    let array = match &value {
        Value::Array(items) => items,
        Value::Object(map) => match map.get("variants") {
            Some(Value::Array(items)) => items,
            _ => {
                return Err(VariantParseError::Parse(
                    "object has no \"variants\" array".into(),
                ))
            }
        },
        _ => return Err(VariantParseError::Parse("expected an object or array".into())),
    };
    let variants = array
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| VariantParseError::Parse("variants must be strings".into()))?;
    if variants.len() != expected {
        return Err(VariantParseError::Count {
            found: variants.len(),
            expected,
        });
    }
    Ok(variants)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    PartialSuccess { kept: usize },
    Failed { reason: String },
    /// No entities to mask; passed through unaugmented.
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    TagCount,
    Similarity,
    Reinjection,
}

/// Validation record for one candidate variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScore {
    pub attempt: u32,
    pub text: String,
    pub tag_count_ok: bool,
    pub similarity: f64,
    pub verdict: Verdict,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rejection: Option<Rejection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub parent_id: String,
    pub variants: Vec<AnnotatedSentence>,
    pub attempts: u32,
    pub outcome: Outcome,
    pub scores: Vec<VariantScore>,
    /// Whether the first attempt already produced every requested variant.
    pub first_attempt_ok: bool,
    /// Failures per attempt, e.g. `transport`, `parse`, `count`, `embed`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FailureKind {
    Transport,
    Validation,
}

/// Runs mask, prompt, generate and validate for one sentence.
pub fn augment_sentence(
    sentence: &AnnotatedSentence,
    config: &ParaphraseConfig,
    client: &dyn LlmClient,
    embedder: &dyn Embedder,
) -> AugmentationRecord {
    let mut record = AugmentationRecord {
        parent_id: sentence.id.clone(),
        variants: Vec::new(),
        attempts: 0,
        outcome: Outcome::Skipped,
        scores: Vec::new(),
        first_attempt_ok: true,
        errors: Vec::new(),
    };
    let template = match mask::mask_entities(sentence) {
        Ok(t) => t,
        Err(_) => return record,
    };
    let rendered = mask::render_template(&template);
    let gate = config.gate();
    let mut kept: Vec<String> = Vec::new();
    let mut last_failure = FailureKind::Validation;

    for attempt in 1..=config.max_retries + 1 {
        if kept.len() >= config.n_variants {
            break;
        }
        if config.regeneration == Regeneration::Full {
            kept.clear();
        }
        let need = config.n_variants - kept.len();
        record.attempts = attempt;
        let temperature = config
            .temperature_schedule
            .get(attempt as usize - 1)
            .or(config.temperature_schedule.last())
            .copied()
            .unwrap_or(0.7);
        let request = LlmRequest {
            model: config.model.clone(),
            system: None,
            user: build_paraphrase_prompt(&rendered, need),
            temperature,
            max_tokens: config.max_tokens,
            json_output: true,
            parent_id: sentence.id.clone(),
            attempt,
        };
        let accepted_before = kept.len();
        match client.complete(&request) {
            Err(e) => {
                last_failure = FailureKind::Transport;
                record.errors.push(format!("attempt {attempt}: transport: {e}"));
            }
            Ok(response) => match parse_variants(&response.text, need) {
                Err(e) => {
                    last_failure = FailureKind::Validation;
                    let kind = match e {
                        VariantParseError::Parse(_) => "parse",
                        VariantParseError::Count { .. } => "count",
                    };
                    record.errors.push(format!("attempt {attempt}: {kind}: {e}"));
                }
                Ok(candidates) => {
                    last_failure = FailureKind::Validation;
                    for text in candidates {
                        let score = judge_variant(&template, &text, attempt, &gate, embedder);
                        match score {
                            Ok(score) => {
                                if score.accepted {
                                    kept.push(text);
                                }
                                record.scores.push(score);
                            }
                            Err(e) => {
                                last_failure = FailureKind::Transport;
                                record.errors.push(format!("attempt {attempt}: embed: {e}"));
                            }
                        }
                    }
                }
            },
        }
        if attempt == 1 && kept.len() - accepted_before < need {
            record.first_attempt_ok = false;
        }
    }

    record.variants = kept
        .iter()
        .enumerate()
        .map(|(i, text)| {
            mask::reinject_entities(text, &template, i)
                .expect("accepted variants were re-injected during validation")
        })
        .collect();
    let n = record.variants.len();
    record.outcome = if n == config.n_variants {
        Outcome::Success
    } else if n > 0 {
        Outcome::PartialSuccess { kept: n }
    } else {
        Outcome::Failed {
            reason: match last_failure {
                FailureKind::Transport => "transport".into(),
                FailureKind::Validation => "validation".into(),
            },
        }
    };
    record
}

fn judge_variant(
    template: &MaskedTemplate,
    text: &str,
    attempt: u32,
    gate: &GateConfig,
    embedder: &dyn Embedder,
) -> Result<VariantScore, validate::EmbedError> {
    let outcome = validate::validate_variant(template, text, gate, embedder)?;
    let mut rejection = match outcome.verdict {
        Verdict::Accept => None,
        Verdict::Retry if !outcome.tag_count_ok => Some(Rejection::TagCount),
        Verdict::Retry | Verdict::Fallback => Some(Rejection::Similarity),
    };
    if rejection.is_none() && mask::reinject_entities(text, template, 0).is_err() {
        rejection = Some(Rejection::Reinjection);
    }
    Ok(VariantScore {
        attempt,
        text: text.to_string(),
        tag_count_ok: outcome.tag_count_ok,
        similarity: outcome.similarity,
        verdict: outcome.verdict,
        accepted: rejection.is_none(),
        rejection,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub inputs: usize,
    /// Sentences without entities, passed through.
    pub skipped: usize,
    /// Sentences that went through generation.
    pub eligible: usize,
    pub succeeded: usize,
    pub partial: usize,
    pub failed: usize,
    pub variants_kept: usize,
    /// failed / eligible
    pub failure_rate: f64,
    /// Sentences whose first attempt fell short of the requested variants.
    pub first_attempt_failures: usize,
    /// first_attempt_failures / eligible
    pub failure_first_attempt: f64,
    /// Candidate variants rejected on the first attempt / candidates requested on it.
    pub first_attempt_variant_rejection_rate: f64,
    /// Attempts beyond the first, summed over sentences.
    pub regenerations: usize,
    pub total_attempts: usize,
    /// Candidate variants that reached validation but were rejected.
    pub rejected_variants: usize,
    pub transport_failures: usize,
}

impl AugmentSummary {
    pub fn from_records(records: &[AugmentationRecord], n_variants: usize) -> Self {
        let mut s = AugmentSummary {
            inputs: records.len(),
            ..Default::default()
        };
        let mut first_attempt_rejected = 0usize;
        for r in records {
            match &r.outcome {
                Outcome::Skipped => {
                    s.skipped += 1;
                    continue;
                }
                Outcome::Success => s.succeeded += 1,
                Outcome::PartialSuccess { .. } => s.partial += 1,
                Outcome::Failed { reason } => {
                    s.failed += 1;
                    if reason == "transport" {
                        s.transport_failures += 1;
                    }
                }
            }
            s.eligible += 1;
            s.variants_kept += r.variants.len();
            s.total_attempts += r.attempts as usize;
            s.regenerations += r.attempts.saturating_sub(1) as usize;
            if !r.first_attempt_ok {
                s.first_attempt_failures += 1;
            }
            let first_accepted = r
                .scores
                .iter()
                .filter(|v| v.attempt == 1 && v.accepted)
                .count();
            first_attempt_rejected += n_variants.saturating_sub(first_accepted);
            s.rejected_variants += r.scores.iter().filter(|v| !v.accepted).count();
        }
        if s.eligible > 0 {
            s.failure_rate = s.failed as f64 / s.eligible as f64;
            s.failure_first_attempt = s.first_attempt_failures as f64 / s.eligible as f64;
            s.first_attempt_variant_rejection_rate =
                first_attempt_rejected as f64 / (s.eligible * n_variants) as f64;
        }
        s
    }
}

/// Augments every sentence with at most `max_parallel_requests` in flight.
/// Records come back in input order.
pub fn augment_corpus(
    sentences: &[AnnotatedSentence],
    config: &ParaphraseConfig,
    client: &dyn LlmClient,
    embedder: &dyn Embedder,
) -> (Vec<AugmentationRecord>, AugmentSummary) {
    use rayon::prelude::*;

    let run = || -> Vec<AugmentationRecord> {
        sentences
            .par_iter()
            .map(|s| augment_sentence(s, config, client, embedder))
            .collect()
    };
    let records = match rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_parallel_requests.max(1))
        .build()
    {
        Ok(pool) => pool.install(run),
        Err(_) => sentences
            .iter()
            .map(|s| augment_sentence(s, config, client, embedder))
            .collect(),
    };
    let summary = AugmentSummary::from_records(&records, config.n_variants);
    (records, summary)
}

/// Kept variant sentences of all records, in record order.
pub fn collect_variants(records: &[AugmentationRecord]) -> Vec<AnnotatedSentence> {
    records.iter().flat_map(|r| r.variants.iter().cloned()).collect()
}
