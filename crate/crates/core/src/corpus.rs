//! Annotated corpus types, ingestion (CoNLL, JSONL), filtering and sampling.
//!
//! Spans use half-open token ranges `[start, end)`. Sentence ids are
//! `<source>#<ordinal>` for ingested data so augmented and duplicated records
//! can point back at their parent.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::tagfmt::{self, TagError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: expected {expected} columns, found {found}")]
    ColumnCount {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: {source}")]
    Tag {
        line: usize,
        #[source]
        source: TagError,
    },
    #[error("line {line}: malformed JSON: {message}")]
    Json { line: usize, message: String },
    #[error("sentence {id:?}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("duplicate sentence id {0:?}")]
    DuplicateId(String),
    #[error("cannot sample {requested} sentences from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("schema: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Borrowed view of one token of a sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token<'a> {
    pub text: &'a str,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

impl fmt::Display for EntitySpan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@[{},{})", self.label, self.start, self.end)
    }
}

/// A pre-tokenized sentence with typed entity spans.
///
/// Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub spans: Vec<EntitySpan>,
    #[serde(default)]
    pub source: String,
}

impl AnnotatedSentence {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<String>,
        spans: Vec<EntitySpan>,
        source: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            tokens,
            spans,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, index: usize) -> Option<Token<'_>> {
        self.tokens.get(index).map(|t| Token {
            text: t.as_str(),
            index,
        })
    }

    pub fn iter_tokens(&self) -> impl Iterator<Item = Token<'_>> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(index, t)| Token {
                text: t.as_str(),
                index,
            })
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn surface(&self, span: &EntitySpan) -> String {
        self.tokens[span.start..span.end].join(" ")
    }

    /// Checks every structural invariant; the error names the first violation.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::Invalid {
            id: self.id.clone(),
            reason,
        };
        if self.id.is_empty() {
            return Err(invalid("empty id".into()));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(invalid(format!("token {i} is empty")));
            }
            if t.chars().any(char::is_whitespace) {
                return Err(invalid(format!("token {i} contains whitespace")));
            }
        }
        let mut prev_end = 0;
        for (i, span) in self.spans.iter().enumerate() {
            if span.start >= span.end {
                return Err(invalid(format!("span {span} is empty or reversed")));
            }
            if span.end > self.tokens.len() {
                return Err(invalid(format!(
                    "span {span} ends past token count {}",
                    self.tokens.len()
                )));
            }
            let label = span.label.trim();
            if label.is_empty() || label == "O" {
                return Err(invalid(format!("span {i} has invalid label {:?}", span.label)));
            }
            if i > 0 && span.start < prev_end {
                return Err(invalid(format!("span {span} overlaps or is out of order")));
            }
            prev_end = span.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ColumnSeparator {
    Tab,
    Space,
    /// Any run of whitespace.
    #[default]
    Whitespace,
}

/// Layout of a CoNLL file. The token is the first column and the BIO tag the last.
#[derive(Debug, Clone, Copy)]
pub struct ConllOptions {
    pub separator: ColumnSeparator,
    pub columns: usize,
}

impl Default for ConllOptions {
    fn default() -> Self {
        Self {
            separator: ColumnSeparator::Whitespace,
            columns: 2,
        }
    }
}

/// Parses token-per-line BIO data. Blank lines separate sentences and
/// `-DOCSTART-` lines are skipped.
pub fn parse_conll(
    text: &str,
    source: &str,
    options: ConllOptions,
) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut first_line = 0;

    let flush = |tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     first_line: usize,
                     sentences: &mut Vec<AnnotatedSentence>|
     -> Result<(), CorpusError> {
        if tokens.is_empty() {
            return Ok(());
        }
        let spans = tagfmt::bio_to_spans(tags).map_err(|e| CorpusError::Tag {
            line: first_line + e.position(),
            source: e,
        })?;
        let id = format!("{source}#{}", sentences.len());
        sentences.push(AnnotatedSentence::new(
            id,
            std::mem::take(tokens),
            spans,
            source,
        ));
        tags.clear();
        Ok(())
    };

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, first_line, &mut sentences)?;
            continue;
        }
        let cols: Vec<&str> = match options.separator {
            ColumnSeparator::Tab => line.split('\t').collect(),
            ColumnSeparator::Space => line.split(' ').collect(),
            ColumnSeparator::Whitespace => line.split_whitespace().collect(),
        };
        if cols.first() == Some(&"-DOCSTART-") {
            continue;
        }
        if cols.len() != options.columns || cols.iter().any(|c| c.is_empty()) {
            return Err(CorpusError::ColumnCount {
                line: line_no,
                expected: options.columns,
                found: cols.iter().filter(|c| !c.is_empty()).count(),
            });
        }
        if tokens.is_empty() {
            first_line = line_no;
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
    }
    flush(&mut tokens, &mut tags, first_line, &mut sentences)?;
    Ok(sentences)
}

/// Reads one sentence object per line. Blank lines are ignored.
pub fn parse_jsonl<R: BufRead>(reader: R) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sentence: AnnotatedSentence =
            serde_json::from_str(&line).map_err(|e| CorpusError::Json {
                line: idx + 1,
                message: e.to_string(),
            })?;
        sentence.validate()?;
        if !seen.insert(sentence.id.clone()) {
            return Err(CorpusError::DuplicateId(sentence.id));
        }
        out.push(sentence);
    }
    Ok(out)
}

pub fn parse_jsonl_str(text: &str) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    parse_jsonl(text.as_bytes())
}

/// Writes sentences with keys in the order `id`, `tokens`, `spans`, `source`.
pub fn write_jsonl<W: Write>(
    mut writer: W,
    sentences: &[AnnotatedSentence],
) -> Result<(), CorpusError> {
    for s in sentences {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn emit_jsonl(sentences: &[AnnotatedSentence]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, sentences).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Decides whether a sentence is English.
pub trait LanguageDetector: Send + Sync {
    fn is_english(&self, tokens: &[String]) -> bool;
}

const ENGLISH_STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "an", "and", "are", "as", "at", "be", "been", "but",
    "by", "can", "could", "did", "do", "for", "from", "had", "has", "have", "he", "her", "his",
    "i", "if", "in", "into", "is", "it", "its", "may", "more", "most", "not", "of", "on", "one",
    "or", "our", "she", "so", "some", "than", "that", "the", "their", "them", "then", "there",
    "these", "they", "this", "to", "two", "was", "we", "were", "what", "when", "which", "while",
    "who", "will", "with", "would", "you",
];

/// ASCII-letter ratio plus a minimum share of English function words.
///
/// Only tokens containing at least one letter take part in either ratio, so
/// punctuation and numbers neither help nor hurt.
#[derive(Debug, Clone, Copy)]
pub struct HeuristicEnglish {
    pub min_ascii_ratio: f64,
    pub min_stopword_ratio: f64,
}

impl Default for HeuristicEnglish {
    fn default() -> Self {
        Self {
            min_ascii_ratio: 0.9,
            min_stopword_ratio: 0.1,
        }
    }
}

impl LanguageDetector for HeuristicEnglish {
    fn is_english(&self, tokens: &[String]) -> bool {
        let mut alphabetic = 0usize;
        let mut ascii = 0usize;
        let mut stopwords = 0usize;
        for t in tokens {
            if !t.chars().any(char::is_alphabetic) {
                continue;
            }
            alphabetic += 1;
            if t
                .chars()
                .filter(|c| c.is_alphabetic())
                .all(|c| c.is_ascii_alphabetic())
            {
                ascii += 1;
            }
            let lower = t.to_ascii_lowercase();
            if ENGLISH_STOPWORDS.binary_search(&lower.as_str()).is_ok() {
                stopwords += 1;
            }
        }
        let n = alphabetic as f64;
        alphabetic > 0
            && stopwords > 0
            && ascii as f64 / n >= self.min_ascii_ratio
            && stopwords as f64 / n >= self.min_stopword_ratio
    }
}

#[derive(Debug, Clone)]
pub struct FilterCriteria {
    pub min_words: usize,
    pub english_only: bool,
    pub label_allowlist: Option<BTreeSet<String>>,
    pub drop_entityless: bool,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            min_words: 10,
            english_only: true,
            label_allowlist: None,
            drop_entityless: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MinWords,
    NotEnglish,
    Allowlist,
    NoEntities,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::MinWords => "min_words",
            RejectReason::NotEnglish => "not_english",
            RejectReason::Allowlist => "allowlist",
            RejectReason::NoEntities => "no_entities",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    /// The sentence as it was received.
    pub sentence: AnnotatedSentence,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<AnnotatedSentence>,
    pub rejected: Vec<Rejection>,
}

pub fn filter_corpus(sentences: &[AnnotatedSentence], criteria: &FilterCriteria) -> FilterOutcome {
    filter_corpus_with(sentences, criteria, &HeuristicEnglish::default())
}

/// Rules fire in order: word count, language, label allowlist, entityless.
pub fn filter_corpus_with(
    sentences: &[AnnotatedSentence],
    criteria: &FilterCriteria,
    detector: &dyn LanguageDetector,
) -> FilterOutcome {
    let mut outcome = FilterOutcome::default();
    for s in sentences {
        let verdict = if s.tokens.len() < criteria.min_words {
            Err(RejectReason::MinWords)
        } else if criteria.english_only && !detector.is_english(&s.tokens) {
            Err(RejectReason::NotEnglish)
        } else {
            let mut kept = s.clone();
            if let Some(allow) = &criteria.label_allowlist {
                kept.spans.retain(|sp| allow.contains(&sp.label));
            }
            if !s.spans.is_empty() && kept.spans.is_empty() {
                Err(RejectReason::Allowlist)
            } else if criteria.drop_entityless && kept.spans.is_empty() {
                Err(RejectReason::NoEntities)
            } else {
                Ok(kept)
            }
        };
        match verdict {
            Ok(kept) => outcome.kept.push(kept),
            Err(reason) => outcome.rejected.push(Rejection {
                sentence: s.clone(),
                reason,
            }),
        }
    }
    outcome
}

/// Uniform sample without replacement, returned in original order.
pub fn sample_corpus(
    sentences: &[AnnotatedSentence],
    n: usize,
    seed: u64,
) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    if n > sentences.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: sentences.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, sentences.len(), n).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| sentences[i].clone()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineEntry {
    #[serde(default)]
    pub definition: String,
    #[serde(default)]
    pub guidelines: String,
}

/// Entity-type inventory in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelSchema {
    pub name: String,
    pub labels: IndexMap<String, GuidelineEntry>,
}

struct StrictLabels(IndexMap<String, GuidelineEntry>);

impl<'de> Deserialize<'de> for StrictLabels {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct LabelsVisitor;

        impl<'de> Visitor<'de> for LabelsVisitor {
            type Value = StrictLabels;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object mapping label to {definition, guidelines}")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<StrictLabels, A::Error> {
                let mut labels = IndexMap::new();
                while let Some((label, entry)) = map.next_entry::<String, GuidelineEntry>()? {
                    if labels.contains_key(&label) {
                        return Err(serde::de::Error::custom(format!(
                            "duplicate label {label:?}"
                        )));
                    }
                    labels.insert(label, entry);
                }
                Ok(StrictLabels(labels))
            }
        }

        deserializer.deserialize_map(LabelsVisitor)
    }
}

impl LabelSchema {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            labels: IndexMap::new(),
        }
    }

    pub fn with_label(
        mut self,
        label: impl Into<String>,
        definition: impl Into<String>,
        guidelines: impl Into<String>,
    ) -> Self {
        self.labels.insert(
            label.into(),
            GuidelineEntry {
                definition: definition.into(),
                guidelines: guidelines.into(),
            },
        );
        self
    }

    pub fn from_json_str(name: impl Into<String>, text: &str) -> Result<Self, CorpusError> {
        let StrictLabels(labels) =
            serde_json::from_str(text).map_err(|e| CorpusError::Schema(e.to_string()))?;
        let schema = Self {
            name: name.into(),
            labels,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.labels).expect("schema serializes")
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for label in self.labels.keys() {
            if label.trim().is_empty() {
                return Err(CorpusError::Schema("empty label name".into()));
            }
            if label == "O" {
                return Err(CorpusError::Schema("label \"O\" is reserved".into()));
            }
        }
        Ok(())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains_key(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label_names(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }
}
