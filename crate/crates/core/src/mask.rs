//! Entity masking for paraphrase prompts and re-injection of entity surfaces
//! into returned variants.
//!
//! Every entity span becomes one typed placeholder. Rendered placeholders are
//! `<<LABEL>>`, or `<<LABEL#k>>` (k counting from 1 within the label) when a
//! label occurs more than once in the sentence.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, EntitySpan};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("sentence {0:?} has no entities: nothing to mask")]
    NothingToMask(String),
    #[error("variant has {found} placeholders, expected {expected}")]
    Mismatch { found: usize, expected: usize },
    #[error("variant uses placeholder label {0:?} which is not in the template")]
    UnknownLabel(String),
    #[error("label {label:?} appears {found} times, expected {expected}")]
    LabelMismatch {
        label: String,
        found: usize,
        expected: usize,
    },
    #[error("placeholder {label}#{ordinal} does not name an entity of the template")]
    BadOrdinal { label: String, ordinal: usize },
    #[error("placeholder {label}#{ordinal} used twice")]
    DuplicatePlaceholder { label: String, ordinal: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Text { text: String },
    Placeholder { ordinal: usize, label: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedEntity {
    pub ordinal: usize,
    pub label: String,
    /// Entity tokens joined by single spaces.
    pub surface: String,
    pub original_span: EntitySpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedTemplate {
    pub parts: Vec<Segment>,
    pub entities: Vec<MaskedEntity>,
    pub parent_id: String,
    #[serde(default)]
    pub source: String,
}

impl MaskedTemplate {
    /// Number of entities carrying `label`.
    pub fn label_count(&self, label: &str) -> usize {
        self.entities.iter().filter(|e| e.label == label).count()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.entities.iter().any(|e| e.label == label)
    }

    /// The original sentence text: parts with surfaces substituted.
    pub fn original_text(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            match part {
                Segment::Text { text } => out.push_str(text),
                Segment::Placeholder { ordinal, .. } => {
                    out.push_str(&self.entities[*ordinal].surface)
                }
            }
        }
        out
    }
}

pub fn mask_entities(sentence: &AnnotatedSentence) -> Result<MaskedTemplate, MaskError> {
    if sentence.spans.is_empty() {
        return Err(MaskError::NothingToMask(sentence.id.clone()));
    }
    let mut parts = Vec::new();
    let mut entities = Vec::new();
    // Pending plain text, including the single spaces between items.
    let mut text = String::new();
    let mut cursor = 0;
    let mut first = true;
    let mut spans = sentence.spans.iter().enumerate().peekable();
    while cursor < sentence.tokens.len() {
        if !first {
            text.push(' ');
        }
        first = false;
        match spans.next_if(|(_, span)| span.start == cursor) {
            Some((ordinal, span)) => {
                if !text.is_empty() {
                    parts.push(Segment::Text {
                        text: std::mem::take(&mut text),
                    });
                }
                parts.push(Segment::Placeholder {
                    ordinal,
                    label: span.label.clone(),
                });
                entities.push(MaskedEntity {
                    ordinal,
                    label: span.label.clone(),
                    surface: sentence.surface(span),
                    original_span: span.clone(),
                });
                cursor = span.end;
            }
            None => {
                text.push_str(&sentence.tokens[cursor]);
                cursor += 1;
            }
        }
    }
    if !text.is_empty() {
        parts.push(Segment::Text { text });
    }
    Ok(MaskedTemplate {
        parts,
        entities,
        parent_id: sentence.id.clone(),
        source: sentence.source.clone(),
    })
}

/// 1-based ordinal of each entity within its label.
fn label_ordinals(t: &MaskedTemplate) -> Vec<usize> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    t.entities
        .iter()
        .map(|e| {
            let n = seen.entry(e.label.as_str()).or_default();
            *n += 1;
            *n
        })
        .collect()
}

pub fn render_template(t: &MaskedTemplate) -> String {
    let ordinals = label_ordinals(t);
    let mut out = String::new();
    for part in &t.parts {
        match part {
            Segment::Text { text } => out.push_str(text),
            Segment::Placeholder { ordinal, label } => {
                out.push_str("<<");
                out.push_str(label);
                if t.label_count(label) > 1 {
                    out.push('#');
                    out.push_str(&ordinals[*ordinal].to_string());
                }
                out.push_str(">>");
            }
        }
    }
    out
}

fn placeholder_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<<([^<>]*)>>").expect("valid regex"))
}

/// A `<<...>>` occurrence in untrusted text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoundPlaceholder {
    pub label: String,
    pub ordinal: Option<usize>,
    /// Byte range in the scanned text.
    pub start: usize,
    pub end: usize,
}

/// Finds every `<<LABEL>>` / `<<LABEL#k>>` in `text`.
pub fn scan_placeholders(text: &str) -> Vec<FoundPlaceholder> {
    placeholder_regex()
        .captures_iter(text)
        .map(|cap| {
            let whole = cap.get(0).expect("group 0 always matches");
            let inner = cap[1].trim();
            let (label, ordinal) = match inner.rsplit_once('#') {
                Some((label, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => {
                    (label.trim(), k.parse().ok())
                }
                _ => (inner, None),
            };
            FoundPlaceholder {
                label: label.to_string(),
                ordinal,
                start: whole.start(),
                end: whole.end(),
            }
        })
        .collect()
}

/// Removes every placeholder from `text`.
pub fn strip_placeholders(text: &str) -> String {
    placeholder_regex().replace_all(text, " ").into_owned()
}

/// Maps each placeholder found in the variant to a template entity.
///
/// Suffixed placeholders bind to that ordinal; bare ones take the remaining
/// entities of their label left to right.
fn assign(
    found: &[FoundPlaceholder],
    t: &MaskedTemplate,
) -> Result<Vec<usize>, MaskError> {
    if found.len() != t.entities.len() {
        return Err(MaskError::Mismatch {
            found: found.len(),
            expected: t.entities.len(),
        });
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for e in &t.entities {
        by_label.entry(e.label.as_str()).or_default().push(e.ordinal);
    }
    let mut found_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in found {
        if !by_label.contains_key(p.label.as_str()) {
            return Err(MaskError::UnknownLabel(p.label.clone()));
        }
        *found_counts.entry(p.label.as_str()).or_default() += 1;
    }
    for (label, ordinals) in &by_label {
        let n = found_counts.get(label).copied().unwrap_or(0);
        if n != ordinals.len() {
            return Err(MaskError::LabelMismatch {
                label: label.to_string(),
                found: n,
                expected: ordinals.len(),
            });
        }
    }

    let mut taken = vec![false; t.entities.len()];
    let mut assignment = vec![usize::MAX; found.len()];
    for (i, p) in found.iter().enumerate() {
        if let Some(k) = p.ordinal {
            let candidates = &by_label[p.label.as_str()];
            let entity = *k
                .checked_sub(1)
                .and_then(|idx| candidates.get(idx))
                .ok_or_else(|| MaskError::BadOrdinal {
                    label: p.label.clone(),
                    ordinal: k,
                })?;
            if taken[entity] {
                return Err(MaskError::DuplicatePlaceholder {
                    label: p.label.clone(),
                    ordinal: k,
                });
            }
            taken[entity] = true;
            assignment[i] = entity;
        }
    }
    for (i, p) in found.iter().enumerate() {
        if p.ordinal.is_none() {
            let entity = by_label[p.label.as_str()]
                .iter()
                .copied()
                .find(|&e| !taken[e])
                .expect("label counts match, so a free entity remains");
            taken[entity] = true;
            assignment[i] = entity;
        }
    }
    Ok(assignment)
}

/// Substitutes the recorded surfaces into a variant and re-tokenizes it.
///
/// Placeholder boundaries are token boundaries, so `<<PER>>'s` yields the
/// entity tokens followed by a separate `'s` token. The new id is
/// `<parent_id>::v<variant_index>`.
pub fn reinject_entities(
    variant_text: &str,
    t: &MaskedTemplate,
    variant_index: usize,
) -> Result<AnnotatedSentence, MaskError> {
    let found = scan_placeholders(variant_text);
    let assignment = assign(&found, t)?;

    let mut tokens: Vec<String> = Vec::new();
    let mut spans = Vec::with_capacity(found.len());
    let mut cursor = 0;
    for (p, &entity) in found.iter().zip(&assignment) {
        tokens.extend(
            variant_text[cursor..p.start]
                .split_whitespace()
                .map(str::to_string),
        );
        let start = tokens.len();
        let e = &t.entities[entity];
        tokens.extend(e.surface.split_whitespace().map(str::to_string));
        spans.push(EntitySpan::new(start, tokens.len(), e.label.clone()));
        cursor = p.end;
    }
    tokens.extend(
        variant_text[cursor..]
            .split_whitespace()
            .map(str::to_string),
    );
    Ok(AnnotatedSentence {
        id: format!("{}::v{}", t.parent_id, variant_index),
        tokens,
        spans,
        source: t.source.clone(),
    })
}
