//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::collections::BTreeMap;

use nerkit::corpus::{AnnotatedSentence, EntitySpan};
use nerkit::llm::ScriptEntry;
use nerkit::mask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const LABELS: [&str; 4] = ["PER", "LOC", "ORG", "MISC"];

/// Words include punctuation and slashes to stress the slash format.
pub const VOCAB: [&str; 24] = [
    "the", "a", "of", "visited", "Paris", "John", "said", "in", "on", "and", "to", "New", "York",
    "Acme", "Corp", ",", ".", "'s", "U.S.", "e-mail", "C++", "km/h", "/", "3.5",
];

#[derive(Debug, Clone, Copy)]
pub struct GenOptions<'a> {
    pub min_len: usize,
    pub max_len: usize,
    pub labels: &'a [&'a str],
    /// Forbid same-label spans that touch.
    pub no_adjacent_same_label: bool,
    pub max_span_len: usize,
}

impl Default for GenOptions<'static> {
    fn default() -> Self {
        Self {
            min_len: 1,
            max_len: 30,
            labels: &LABELS,
            no_adjacent_same_label: false,
            max_span_len: 4,
        }
    }
}

pub fn random_sentence(rng: &mut ChaCha8Rng, id: String, opts: &GenOptions<'_>) -> AnnotatedSentence {
    let n = rng.random_range(opts.min_len..=opts.max_len);
    let tokens: Vec<String> = (0..n)
        .map(|_| VOCAB[rng.random_range(0..VOCAB.len())].to_string())
        .collect();
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut i = 0;
    while i < n {
        if rng.random_bool(0.25) {
            let len = rng.random_range(1..=opts.max_span_len).min(n - i);
            let mut label = opts.labels[rng.random_range(0..opts.labels.len())];
            if opts.no_adjacent_same_label {
                if let Some(prev) = spans.last() {
                    if prev.end == i && prev.label == label {
                        if opts.labels.len() == 1 {
                            i += 1;
                            continue;
                        }
                        label = opts
                            .labels
                            .iter()
                            .find(|l| **l != prev.label)
                            .copied()
                            .unwrap();
                    }
                }
            }
            spans.push(EntitySpan::new(i, i + len, label));
            i += len;
        } else {
            i += 1;
        }
    }
    AnnotatedSentence::new(id, tokens, spans, "synthetic")
}

pub fn random_corpus(seed: u64, n: usize, opts: &GenOptions<'_>) -> Vec<AnnotatedSentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| random_sentence(&mut rng, format!("synthetic#{i}"), opts))
        .collect()
}

/// English-looking sentences of 12 to 20 words with at least one entity.
pub fn gold_corpus(n: usize) -> Vec<AnnotatedSentence> {
    const NAMES: [&str; 5] = ["Alice", "Bob", "Carol", "Dmitri", "Eve"];
    const PLACES: [&str; 5] = ["Berlin", "Lagos", "Lima", "Osaka", "Quebec"];
    (0..n)
        .map(|i| {
            let who = NAMES[i % NAMES.len()];
            let place = PLACES[(i / NAMES.len()) % PLACES.len()];
            let text = format!(
                "Yesterday {who} Smith travelled to {place} with the research team to present results number {i} at the annual meeting"
            );
            let tokens: Vec<String> = text.split(' ').map(String::from).collect();
            AnnotatedSentence::new(
                format!("gold#{i}"),
                tokens,
                vec![EntitySpan::new(1, 3, "PER"), EntitySpan::new(5, 6, "LOC")],
                "gold",
            )
        })
        .collect()
}

/// A variant that keeps every placeholder and almost all context words.
pub fn good_variants(sentence: &AnnotatedSentence, n: usize) -> Vec<String> {
    let t = mask::mask_entities(sentence).expect("gold has entities");
    let rendered = mask::render_template(&t);
    (0..n)
        .map(|k| match k {
            0 => rendered.clone(),
            k => format!("In short {k} , {rendered}"),
        })
        .collect()
}

/// Replaces the first placeholder of the rendered template with a plain word.
pub fn dropped_placeholder(sentence: &AnnotatedSentence) -> String {
    let t = mask::mask_entities(sentence).expect("gold has entities");
    let rendered = mask::render_template(&t);
    let first = &mask::scan_placeholders(&rendered)[0];
    format!("{}someone{}", &rendered[..first.start], &rendered[first.end..])
}

pub fn body(variants: &[String]) -> String {
    json!({ "variants": variants }).to_string()
}

/// Every sentence gets `n` valid variants on the first attempt.
pub fn all_success_script(gold: &[AnnotatedSentence], n: usize) -> Vec<ScriptEntry> {
    gold.iter()
        .map(|s| ScriptEntry {
            parent_id: s.id.clone(),
            attempt: Some(1),
            body: body(&good_variants(s, n)),
        })
        .collect()
}

/// Sentences whose index is in `failing` lose a placeholder in one of the two
/// first-attempt variants and receive the missing variant on attempt 2.
pub fn scripted_failures(gold: &[AnnotatedSentence], failing: &[usize]) -> Vec<ScriptEntry> {
    let mut entries = Vec::new();
    for (i, s) in gold.iter().enumerate() {
        let good = good_variants(s, 2);
        if failing.contains(&i) {
            entries.push(ScriptEntry {
                parent_id: s.id.clone(),
                attempt: Some(1),
                body: body(&[good[0].clone(), dropped_placeholder(s)]),
            });
            entries.push(ScriptEntry {
                parent_id: s.id.clone(),
                attempt: Some(2),
                body: body(&[good[1].clone()]),
            });
        } else {
            entries.push(ScriptEntry {
                parent_id: s.id.clone(),
                attempt: Some(1),
                body: body(&good),
            });
        }
    }
    entries
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OracleCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Brute-force scorer: enumerates `(start, end, label)` triples into
/// deduplicated lists and counts memberships pairwise.
pub fn oracle_counts(pairs: &[(Vec<EntitySpan>, Vec<EntitySpan>)]) -> BTreeMap<String, OracleCounts> {
    let mut out: BTreeMap<String, OracleCounts> = BTreeMap::new();
    for (gold, pred) in pairs {
        let triples = |spans: &[EntitySpan]| {
            let mut v: Vec<(usize, usize, String)> = Vec::new();
            for s in spans {
                let t = (s.start, s.end, s.label.trim().to_string());
                if !v.contains(&t) {
                    v.push(t);
                }
            }
            v
        };
        let g = triples(gold);
        let p = triples(pred);
        for t in &g {
            let c = out.entry(t.2.clone()).or_default();
            if p.contains(t) {
                c.tp += 1;
            } else {
                c.fn_ += 1;
            }
        }
        for t in &p {
            if !g.contains(t) {
                out.entry(t.2.clone()).or_default().fp += 1;
            }
        }
    }
    out
}

pub fn oracle_prf(c: OracleCounts) -> (f64, f64, f64) {
    let p = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let r = if c.tp + c.fn_ == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Random edits of the gold spans: drop, shift a boundary, relabel, invent.
/// The result never has touching same-label spans or overlaps.
pub fn perturb(rng: &mut ChaCha8Rng, sentence: &AnnotatedSentence) -> Vec<EntitySpan> {
    let n = sentence.tokens.len();
    let mut out: Vec<EntitySpan> = Vec::new();
    for s in &sentence.spans {
        match rng.random_range(0..5) {
            0 => {}
            1 => {
                let mut s = s.clone();
                if s.end < n && rng.random_bool(0.5) {
                    s.end += 1;
                } else if s.len() > 1 {
                    s.start += 1;
                }
                out.push(s);
            }
            2 => out.push(EntitySpan::new(s.start, s.end, LABELS[rng.random_range(0..LABELS.len())])),
            _ => out.push(s.clone()),
        }
    }
    if n > 0 && rng.random_bool(0.3) {
        let i = rng.random_range(0..n);
        out.push(EntitySpan::new(i, i + 1, LABELS[rng.random_range(0..LABELS.len())]));
    }
    // Resolve overlaps and touching same-label spans left to right.
    out.sort();
    let mut clean: Vec<EntitySpan> = Vec::new();
    for s in out {
        if let Some(prev) = clean.last() {
            if s.start < prev.end || (s.start == prev.end && s.label == prev.label) {
                continue;
            }
        }
        clean.push(s);
    }
    clean
}

/// Renders predicted spans over the gold words as a slash generation.
pub fn render_prediction(sentence: &AnnotatedSentence, spans: &[EntitySpan]) -> String {
    let mut tags = vec!["O".to_string(); sentence.tokens.len()];
    for s in spans {
        for t in &mut tags[s.start..s.end] {
            *t = s.label.clone();
        }
    }
    sentence
        .tokens
        .iter()
        .zip(&tags)
        .map(|(w, t)| format!("{w}/{t}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn science_schema_text() -> &'static str {
    include_str!("../../data/science_schema.json")
}
