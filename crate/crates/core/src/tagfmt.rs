//! Conversions between spans, BIO tags and the word/slash format, plus
//! alignment of model generations back onto gold tokens.
//!
//! The word/slash format tags every word: `John/PER, visited/O`. Words of a
//! multi-word entity repeat the same label, so two adjacent entities of the
//! same label cannot be told apart once flattened.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, EntitySpan};

pub const OUTSIDE: &str = "O";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("tag {tag:?} at position {position} is not O, B-<label> or I-<label>")]
    UnknownShape { position: usize, tag: String },
    #[error("{tags} tags for {tokens} tokens")]
    LengthMismatch { tokens: usize, tags: usize },
}

impl TagError {
    /// Zero-based tag position the error refers to (0 for length errors).
    pub fn position(&self) -> usize {
        match self {
            TagError::UnknownShape { position, .. } => *position,
            TagError::LengthMismatch { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Bio,
    /// Bare labels, the word/slash scheme.
    #[default]
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    pub tags: Vec<String>,
    pub scheme: TagScheme,
}

impl TagSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn spans_to_bio(sentence: &AnnotatedSentence) -> TagSequence {
    let mut tags = vec![OUTSIDE.to_string(); sentence.tokens.len()];
    for span in &sentence.spans {
        tags[span.start] = format!("B-{}", span.label);
        for tag in &mut tags[span.start + 1..span.end] {
            *tag = format!("I-{}", span.label);
        }
    }
    TagSequence {
        tags,
        scheme: TagScheme::Bio,
    }
}

enum BioTag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn classify_bio(tag: &str) -> Option<BioTag<'_>> {
    let tag = tag.trim();
    if tag == OUTSIDE {
        return Some(BioTag::Outside);
    }
    let (prefix, label) = (tag.get(..2)?, tag.get(2..)?.trim());
    if label.is_empty() || label == OUTSIDE {
        return None;
    }
    match prefix {
        "B-" => Some(BioTag::Begin(label)),
        "I-" => Some(BioTag::Inside(label)),
        _ => None,
    }
}

/// Maximal B-I runs become spans. An `I-X` that does not continue an `X`
/// run opens a new span.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<EntitySpan>, TagError> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (position, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let parsed = classify_bio(tag).ok_or_else(|| TagError::UnknownShape {
            position,
            tag: tag.to_string(),
        })?;
        match parsed {
            BioTag::Outside => spans.extend(open.take()),
            BioTag::Begin(label) => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(position, position + 1, label));
            }
            BioTag::Inside(label) => match open.as_mut() {
                Some(span) if span.label == label => span.end = position + 1,
                _ => {
                    spans.extend(open.take());
                    open = Some(EntitySpan::new(position, position + 1, label));
                }
            },
        }
    }
    spans.extend(open);
    Ok(spans)
}

/// Like [`bio_to_spans`] for untrusted input: malformed tags are read as `O`
/// and counted.
pub fn bio_to_spans_lenient<S: AsRef<str>>(tags: &[S]) -> (Vec<EntitySpan>, usize) {
    let mut irregular = 0;
    let cleaned: Vec<&str> = tags
        .iter()
        .map(|t| {
            let t = t.as_ref();
            if classify_bio(t).is_some() {
                t
            } else {
                irregular += 1;
                OUTSIDE
            }
        })
        .collect();
    let spans = bio_to_spans(&cleaned).expect("all tags are well-formed after cleaning");
    (spans, irregular)
}

/// Per-token labels: the span label for covered tokens, `O` elsewhere.
pub fn spans_to_flat(sentence: &AnnotatedSentence) -> TagSequence {
    let mut tags = vec![OUTSIDE.to_string(); sentence.tokens.len()];
    for span in &sentence.spans {
        for tag in &mut tags[span.start..span.end] {
            *tag = span.label.clone();
        }
    }
    TagSequence {
        tags,
        scheme: TagScheme::Flat,
    }
}

fn join_slash<'a>(words: impl Iterator<Item = (&'a str, &'a str)>) -> String {
    let mut out = String::new();
    for (i, (word, tag)) in words.enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(word);
        out.push('/');
        out.push_str(tag);
    }
    out
}

/// `word/label` items joined by `", "`. Token text is emitted verbatim.
pub fn spans_to_slash(sentence: &AnnotatedSentence) -> String {
    let flat = spans_to_flat(sentence);
    join_slash(
        sentence
            .tokens
            .iter()
            .map(String::as_str)
            .zip(flat.tags.iter().map(String::as_str)),
    )
}

/// Word/slash rendering with BIO tags, used for BIO-format generations.
pub fn spans_to_bio_slash(sentence: &AnnotatedSentence) -> String {
    let bio = spans_to_bio(sentence);
    join_slash(
        sentence
            .tokens
            .iter()
            .map(String::as_str)
            .zip(bio.tags.iter().map(String::as_str)),
    )
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlashParse {
    pub items: Vec<(String, String)>,
    /// Items without a usable `word/tag` shape.
    pub irregular: usize,
}

fn parse_item(item: &str, out: &mut SlashParse) {
    match item.rfind('/') {
        Some(idx) if idx > 0 && idx + 1 < item.len() => {
            out.items
                .push((item[..idx].to_string(), item[idx + 1..].trim().to_string()));
        }
        _ => {
            out.irregular += 1;
            out.items.push((item.to_string(), OUTSIDE.to_string()));
        }
    }
}

/// Parses a word/slash generation. Never fails.
///
/// Items are separated by `", "`; whitespace inside an item separates further
/// items, so the space-separated `x/y x/y` layout parses too. Each item splits
/// on its last `/`. A trailing period after the final tag is dropped.
pub fn slash_to_tags(output: &str) -> SlashParse {
    let mut text = output.trim();
    if text.len() > 1 && text.ends_with('.') && !text[..text.len() - 1].ends_with('/') {
        let without = &text[..text.len() - 1];
        // Only strip when the period is glued to a tag, not a `./O` token.
        if without.rsplit(", ").next().is_some_and(|last| last.contains('/')) {
            text = without.trim_end();
        }
    }
    let mut out = SlashParse::default();
    if text.is_empty() {
        return out;
    }
    for piece in text.split(", ") {
        let mut any = false;
        for item in piece.split_whitespace() {
            any = true;
            parse_item(item, &mut out);
        }
        if !any {
            out.irregular += 1;
        }
    }
    out
}

/// Parses a BIO generation: either word/slash items carrying BIO tags, or
/// one `word tag` pair per line.
pub fn parse_bio_generation(output: &str) -> SlashParse {
    if !output.trim().contains('\n') {
        return slash_to_tags(output);
    }
    let mut out = SlashParse::default();
    for line in output.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.rsplit_once(char::is_whitespace) {
            Some((word, tag)) if !word.trim().is_empty() => {
                out.items
                    .push((word.trim().to_string(), tag.trim().to_string()));
            }
            _ => {
                // A lone item may still be in word/tag form.
                parse_item(line, &mut out);
            }
        }
    }
    out
}

/// Projects predicted `(word, tag)` pairs onto the gold tokens through a
/// longest common subsequence on exact word text.
///
/// Matched gold tokens take the predicted tag, unmatched ones get `O`, and
/// predicted words without a gold partner are dropped.
pub fn align_predictions<G, W, T>(gold_tokens: &[G], predicted: &[(W, T)]) -> TagSequence
where
    G: AsRef<str>,
    W: AsRef<str>,
    T: AsRef<str>,
{
    let n = gold_tokens.len();
    let m = predicted.len();
    let mut tags = vec![OUTSIDE.to_string(); n];

    // Fast path: identical word sequences.
    if n == m
        && gold_tokens
            .iter()
            .zip(predicted)
            .all(|(g, (w, _))| g.as_ref() == w.as_ref())
    {
        for (tag, (_, t)) in tags.iter_mut().zip(predicted) {
            *tag = normalize_tag(t.as_ref());
        }
        return TagSequence {
            tags,
            scheme: TagScheme::Flat,
        };
    }

    // lcs[i][j] = LCS length of gold[i..] and predicted[j..]
    let width = m + 1;
    let mut lcs = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            lcs[i * width + j] = if gold_tokens[i].as_ref() == predicted[j].0.as_ref() {
                lcs[(i + 1) * width + j + 1] + 1
            } else {
                lcs[(i + 1) * width + j].max(lcs[i * width + j + 1])
            };
        }
    }

    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if gold_tokens[i].as_ref() == predicted[j].0.as_ref()
            && lcs[i * width + j] == lcs[(i + 1) * width + j + 1] + 1
        {
            tags[i] = normalize_tag(predicted[j].1.as_ref());
            i += 1;
            j += 1;
        } else if lcs[(i + 1) * width + j] >= lcs[i * width + j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    TagSequence {
        tags,
        scheme: TagScheme::Flat,
    }
}

fn normalize_tag(tag: &str) -> String {
    let t = tag.trim();
    if t.is_empty() {
        OUTSIDE.to_string()
    } else {
        t.to_string()
    }
}

/// Maximal runs of one non-`O` label become single spans.
pub fn flat_tags_to_spans<S: AsRef<str>>(tags: &[S]) -> Vec<EntitySpan> {
    let mut spans: Vec<EntitySpan> = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        let label = tag.as_ref().trim();
        if label.is_empty() || label == OUTSIDE {
            spans.extend(open.take());
            continue;
        }
        match open.as_mut() {
            Some(span) if span.label == label => span.end = i + 1,
            _ => {
                spans.extend(open.take());
                open = Some(EntitySpan::new(i, i + 1, label));
            }
        }
    }
    spans.extend(open);
    spans
}

/// True when two spans of the same label touch, which the flat format
/// cannot represent.
pub fn has_adjacent_same_label(spans: &[EntitySpan]) -> bool {
    spans
        .windows(2)
        .any(|w| w[0].end == w[1].start && w[0].label == w[1].label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sentence(tokens: &[&str], spans: Vec<EntitySpan>) -> AnnotatedSentence {
        AnnotatedSentence::new(
            "t",
            tokens.iter().map(|s| s.to_string()).collect(),
            spans,
            "test",
        )
    }

    #[test]
    fn bio_rendering() {
        let s = sentence(&["a", "b", "c"], vec![]);
        assert_eq!(spans_to_bio(&s).tags, vec!["O", "O", "O"]);
        let s = sentence(&["New", "York", "wins"], vec![EntitySpan::new(0, 2, "PER")]);
        assert_eq!(spans_to_bio(&s).tags, vec!["B-PER", "I-PER", "O"]);
        let s = sentence(
            &["a", "b"],
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(1, 2, "PER")],
        );
        assert_eq!(spans_to_bio(&s).tags, vec!["B-PER", "B-PER"]);
    }

    #[test]
    fn bio_parsing() {
        assert_eq!(
            bio_to_spans(&["B-PER", "I-PER", "O"]).unwrap(),
            vec![EntitySpan::new(0, 2, "PER")]
        );
        assert_eq!(
            bio_to_spans(&["I-LOC", "O"]).unwrap(),
            vec![EntitySpan::new(0, 1, "LOC")]
        );
        assert_eq!(
            bio_to_spans(&["B-PER", "I-LOC"]).unwrap(),
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(1, 2, "LOC")]
        );
        let err = bio_to_spans(&["O", "PER"]).unwrap_err();
        assert_eq!(err.position(), 1);
        assert!(bio_to_spans(&["B-"]).is_err());
        assert!(bio_to_spans(&["B-O"]).is_err());
    }

    #[test]
    fn lenient_bio_counts_garbage() {
        let (spans, irregular) = bio_to_spans_lenient(&["B-PER", "junk", "I-PER"]);
        assert_eq!(irregular, 1);
        assert_eq!(
            spans,
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(2, 3, "PER")]
        );
    }

    #[test]
    fn slash_rendering() {
        let s = sentence(
            &["John", "visited", "the", "supermarket", "on", "Tuesday"],
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(3, 4, "LOC")],
        );
        assert_eq!(
            spans_to_slash(&s),
            "John/PER, visited/O, the/O, supermarket/LOC, on/O, Tuesday/O"
        );
        let s = sentence(&["a", "b"], vec![]);
        assert_eq!(spans_to_slash(&s), "a/O, b/O");
        let s = sentence(&["World", "Bank"], vec![EntitySpan::new(0, 2, "ORG")]);
        assert_eq!(spans_to_slash(&s), "World/ORG, Bank/ORG");
    }

    #[test]
    fn slash_parsing() {
        let p = slash_to_tags("John/PER, visited/O");
        assert_eq!(
            p.items,
            vec![("John".into(), "PER".into()), ("visited".into(), "O".into())]
        );
        assert_eq!(p.irregular, 0);
        assert_eq!(slash_to_tags("3/4/NUM").items, vec![("3/4".into(), "NUM".into())]);
        let p = slash_to_tags("garbled");
        assert_eq!(p.items, vec![("garbled".into(), "O".into())]);
        assert_eq!(p.irregular, 1);
    }

    #[test]
    fn slash_parsing_tolerances() {
        let p = slash_to_tags("  John/PER, ran/O.  \n");
        assert_eq!(p.items.last().unwrap(), &("ran".into(), "O".into()));
        assert_eq!(p.irregular, 0);
        // a real period token is kept
        let p = slash_to_tags("ran/O, ./O");
        assert_eq!(p.items.last().unwrap(), &(".".into(), "O".into()));
        // space-separated layout
        let p = slash_to_tags("John/PER visited/O");
        assert_eq!(p.items.len(), 2);
        // comma tokens
        let p = slash_to_tags("a,/O, ,/O, b/LOC");
        assert_eq!(
            p.items,
            vec![
                ("a,".into(), "O".into()),
                (",".into(), "O".into()),
                ("b".into(), "LOC".into())
            ]
        );
        assert!(slash_to_tags("").items.is_empty());
        assert_eq!(slash_to_tags("/PER").irregular, 1);
        assert_eq!(slash_to_tags("word/").irregular, 1);
        assert_eq!(slash_to_tags("//O").items, vec![("/".into(), "O".into())]);
    }

    #[test]
    fn bio_line_generation() {
        let p = parse_bio_generation("John B-PER\nvisited O\n");
        assert_eq!(
            p.items,
            vec![("John".into(), "B-PER".into()), ("visited".into(), "O".into())]
        );
        let p = parse_bio_generation("John/B-PER, visited/O");
        assert_eq!(p.items.len(), 2);
    }

    #[test]
    fn alignment() {
        let gold = ["a", "b", "c"];
        let pred = [("a", "X"), ("b", "O"), ("c", "Y")];
        assert_eq!(align_predictions(&gold, &pred).tags, vec!["X", "O", "Y"]);

        let pred = [("a", "X"), ("c", "Y")];
        assert_eq!(align_predictions(&gold, &pred).tags, vec!["X", "O", "Y"]);

        // hallucinated extra word on a five-token fixture
        let gold = ["John", "lives", "in", "New", "York"];
        let pred = [
            ("John", "PER"),
            ("really", "O"),
            ("lives", "O"),
            ("in", "O"),
            ("New", "LOC"),
            ("York", "LOC"),
        ];
        let got = align_predictions(&gold, &pred);
        assert_eq!(got.tags, vec!["PER", "O", "O", "LOC", "LOC"]);

        let empty: [(&str, &str); 0] = [];
        assert_eq!(align_predictions(&gold, &empty).tags.len(), 5);
    }

    #[test]
    fn flat_spans() {
        assert_eq!(
            flat_tags_to_spans(&["PER", "PER", "O"]),
            vec![EntitySpan::new(0, 2, "PER")]
        );
        assert_eq!(
            flat_tags_to_spans(&["PER", "LOC"]),
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(1, 2, "LOC")]
        );
        // two gold one-token PER entities collapse
        let s = sentence(
            &["a", "b"],
            vec![EntitySpan::new(0, 1, "PER"), EntitySpan::new(1, 2, "PER")],
        );
        assert!(has_adjacent_same_label(&s.spans));
        assert_eq!(
            flat_tags_to_spans(&spans_to_flat(&s).tags),
            vec![EntitySpan::new(0, 2, "PER")]
        );
    }
}
