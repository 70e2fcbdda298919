//! Instruction-tuning records in the word/slash format.
//!
//! Each record carries the full instruction (task, guidelines, tag list and,
//! optionally, per-label definitions), the space-joined input words and the
//! slash-format target. Records over the token budget are split into
//! contiguous windows that never cut through an entity.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, EntitySpan, LabelSchema};
use crate::tagfmt::{self, TagScheme};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("schema has no labels")]
    EmptySchema,
    #[error("sentence {id:?} has no tokens")]
    EmptySentence { id: String },
    #[error("sentence {id:?} uses label {label:?} which is not in the schema")]
    LabelNotInSchema { id: String, label: String },
    #[error("instruction alone needs {tokens} tokens, budget is {budget}")]
    InstructionExceedsBudget { tokens: usize, budget: usize },
    #[error("sentence {id:?}: token {index} does not fit in a {budget}-token example")]
    TokenExceedsBudget { id: String, index: usize, budget: usize },
    #[error("sentence {id:?}: entity {span} does not fit in a {budget}-token example")]
    EntityExceedsBudget {
        id: String,
        span: EntitySpan,
        budget: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Counts tokens of a text for budget purposes.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;
}

/// `ceil(utf8_bytes / 4)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicCounter;

impl TokenCounter for HeuristicCounter {
    fn count(&self, text: &str) -> usize {
        text.len().div_ceil(4)
    }
}

/// One token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

pub fn count_tokens(text: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(text)
}

#[derive(Clone)]
pub struct TokenBudget {
    pub max_tokens: usize,
    pub counter: Arc<dyn TokenCounter>,
}

impl TokenBudget {
    pub fn new(max_tokens: usize, counter: Arc<dyn TokenCounter>) -> Self {
        Self {
            max_tokens,
            counter,
        }
    }

    pub fn count(&self, text: &str) -> usize {
        self.counter.count(text)
    }

    /// Tokens of a whole record: instruction, input and output counted separately.
    pub fn measure(&self, example: &InstructionExample) -> usize {
        self.count(&example.instruction) + self.count(&example.input) + self.count(&example.output)
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self {
            max_tokens: 2048,
            counter: Arc::new(HeuristicCounter),
        }
    }
}

impl fmt::Debug for TokenBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TokenBudget")
            .field("max_tokens", &self.max_tokens)
            .finish_non_exhaustive()
    }
}

#[derive(Serialize)]
struct GuidelineBlock<'a> {
    #[serde(rename = "DEFINITION")]
    definition: &'a str,
    #[serde(rename = "GUIDELINES")]
    guidelines: &'a str,
}

pub fn build_instruction(schema: &LabelSchema, include_guidelines: bool) -> String {
    let mut out = String::from(
        "Task Description:\n\
Please analyze the sentence provided, identifying the type of entity for each word on a token-by-token basis.\n\
Each word in the sentence should be annotated with its corresponding named entity tag, using a forward slash / between the word and the tag. Output format is: word_1/label_1, word_2/label_2, ...\n\
\n\
Guideline:\n\
1. Use O for words that are not part of any named entity.\n\
2. For multi-word entities, label each word with the same entity tag.\n\
\n\
Use the specific entity tags: ",
    );
    for label in schema.label_names() {
        out.push_str(label);
        out.push_str(", ");
    }
    out.push_str("and O.");
    if include_guidelines {
        out.push_str("\nTo help you, here are dedicated DEFINITION and GUIDELINES for each entity tag.\n");
        let block: IndexMap<&str, GuidelineBlock<'_>> = schema
            .labels
            .iter()
            .map(|(label, entry)| {
                (
                    label.as_str(),
                    GuidelineBlock {
                        definition: &entry.definition,
                        guidelines: &entry.guidelines,
                    },
                )
            })
            .collect();
        out.push_str(&serde_json::to_string_pretty(&block).expect("guideline block serializes"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleMeta {
    pub id: String,
    pub chunk: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Origin>,
}

/// One training record. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: ExampleMeta,
}

/// Builds records against one schema, reusing the rendered instruction.
#[derive(Debug, Clone)]
pub struct ExampleBuilder<'a> {
    schema: &'a LabelSchema,
    instruction: String,
    instruction_tokens: usize,
    budget: TokenBudget,
    scheme: TagScheme,
}

impl<'a> ExampleBuilder<'a> {
    pub fn new(
        schema: &'a LabelSchema,
        include_guidelines: bool,
        budget: TokenBudget,
    ) -> Result<Self, PromptError> {
        if schema.is_empty() {
            return Err(PromptError::EmptySchema);
        }
        let instruction = build_instruction(schema, include_guidelines);
        let instruction_tokens = budget.count(&instruction);
        if instruction_tokens > budget.max_tokens {
            return Err(PromptError::InstructionExceedsBudget {
                tokens: instruction_tokens,
                budget: budget.max_tokens,
            });
        }
        Ok(Self {
            schema,
            instruction,
            instruction_tokens,
            budget,
            scheme: TagScheme::Flat,
        })
    }

    /// Target tags as plain labels (default) or BIO prefixes.
    pub fn with_scheme(mut self, scheme: TagScheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn instruction(&self) -> &str {
        &self.instruction
    }

    pub fn instruction_tokens(&self) -> usize {
        self.instruction_tokens
    }

    pub fn budget(&self) -> &TokenBudget {
        &self.budget
    }

    pub fn build(&self, sentence: &AnnotatedSentence) -> Result<Vec<InstructionExample>, PromptError> {
        if sentence.tokens.is_empty() {
            return Err(PromptError::EmptySentence {
                id: sentence.id.clone(),
            });
        }
        if let Some(span) = sentence.spans.iter().find(|s| !self.schema.contains(&s.label)) {
            return Err(PromptError::LabelNotInSchema {
                id: sentence.id.clone(),
                label: span.label.clone(),
            });
        }
        let tags = match self.scheme {
            TagScheme::Flat => tagfmt::spans_to_flat(sentence),
            TagScheme::Bio => tagfmt::spans_to_bio(sentence),
        };
        let items: Vec<String> = sentence
            .tokens
            .iter()
            .zip(&tags.tags)
            .map(|(w, t)| format!("{w}/{t}"))
            .collect();
        let windows = self.windows(sentence, &items)?;
        Ok(windows
            .into_iter()
            .enumerate()
            .map(|(chunk, (a, b))| InstructionExample {
                instruction: self.instruction.clone(),
                input: sentence.tokens[a..b].join(" "),
                output: items[a..b].join(", "),
                meta: ExampleMeta {
                    id: sentence.id.clone(),
                    chunk,
                    origin: None,
                },
            })
            .collect())
    }

    fn window_cost(&self, sentence: &AnnotatedSentence, items: &[String], a: usize, b: usize) -> usize {
        self.instruction_tokens
            + self.budget.count(&sentence.tokens[a..b].join(" "))
            + self.budget.count(&items[a..b].join(", "))
    }

    /// Greedy left-to-right windows ending only at positions outside entities.
    fn windows(
        &self,
        sentence: &AnnotatedSentence,
        items: &[String],
    ) -> Result<Vec<(usize, usize)>, PromptError> {
        let n = sentence.tokens.len();
        let max = self.budget.max_tokens;
        if self.window_cost(sentence, items, 0, n) <= max {
            return Ok(vec![(0, n)]);
        }
        let mut inside = vec![false; n + 1];
        for span in &sentence.spans {
            for flag in &mut inside[span.start + 1..span.end] {
                *flag = true;
            }
        }
        let cuts: Vec<usize> = (1..=n).filter(|&p| !inside[p]).collect();

        let mut windows = Vec::new();
        let mut a = 0;
        while a < n {
            let mut best = None;
            for &b in cuts.iter().filter(|&&b| b > a) {
                if self.window_cost(sentence, items, a, b) <= max {
                    best = Some(b);
                } else {
                    break;
                }
            }
            let Some(b) = best else {
                return Err(match sentence.spans.iter().find(|s| s.start == a && s.len() > 1) {
                    Some(span) => PromptError::EntityExceedsBudget {
                        id: sentence.id.clone(),
                        span: span.clone(),
                        budget: max,
                    },
                    None => PromptError::TokenExceedsBudget {
                        id: sentence.id.clone(),
                        index: a,
                        budget: max,
                    },
                });
            };
            windows.push((a, b));
            a = b;
        }
        Ok(windows)
    }
}

pub fn build_example(
    sentence: &AnnotatedSentence,
    schema: &LabelSchema,
    include_guidelines: bool,
    budget: &TokenBudget,
) -> Result<Vec<InstructionExample>, PromptError> {
    ExampleBuilder::new(schema, include_guidelines, budget.clone())?.build(sentence)
}

/// One JSON object per line, LF endings.
pub fn write_training_jsonl<W: Write>(
    mut writer: W,
    examples: &[InstructionExample],
) -> Result<(), PromptError> {
    for e in examples {
        serde_json::to_writer(&mut writer, e).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn emit_training_jsonl(
    examples: &[InstructionExample],
    path: &std::path::Path,
) -> Result<(), PromptError> {
    let file = std::fs::File::create(path)?;
    write_training_jsonl(std::io::BufWriter::new(file), examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Base,
    Gold,
    Augmented,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetRecord {
    pub origin: Origin,
    pub sentence: AnnotatedSentence,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub base: usize,
    pub gold: usize,
    pub augmented: usize,
    pub duplicates: usize,
    pub duplication_factor: usize,
    /// gold + augmented + duplicates
    pub in_domain: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub manifest: Manifest,
}

/// Concatenates base, gold, augmented, then `duplication_factor` extra copies
/// of gold with ids suffixed `::dup<k>` (k from 1).
pub fn assemble_dataset(
    base: &[AnnotatedSentence],
    gold: &[AnnotatedSentence],
    augmented: &[AnnotatedSentence],
    duplication_factor: usize,
) -> Dataset {
    let tag = |origin: Origin, sentences: &[AnnotatedSentence]| {
        sentences
            .iter()
            .cloned()
            .map(move |sentence| DatasetRecord { origin, sentence })
            .collect::<Vec<_>>()
    };
    let mut records = tag(Origin::Base, base);
    records.extend(tag(Origin::Gold, gold));
    records.extend(tag(Origin::Augmented, augmented));
    for k in 1..=duplication_factor {
        records.extend(gold.iter().map(|s| {
            let mut sentence = s.clone();
            sentence.id = format!("{}::dup{k}", s.id);
            DatasetRecord {
                origin: Origin::Duplicate,
                sentence,
            }
        }));
    }
    let duplicates = gold.len() * duplication_factor;
    let manifest = Manifest {
        base: base.len(),
        gold: gold.len(),
        augmented: augmented.len(),
        duplicates,
        duplication_factor,
        in_domain: gold.len() + augmented.len() + duplicates,
        total: records.len(),
    };
    Dataset { records, manifest }
}

/// Builds training records for every dataset entry, tagging each with its origin.
pub fn build_dataset_examples(
    dataset: &Dataset,
    builder: &ExampleBuilder<'_>,
) -> Result<Vec<InstructionExample>, PromptError> {
    let mut out = Vec::with_capacity(dataset.records.len());
    for record in &dataset.records {
        for mut ex in builder.build(&record.sentence)? {
            ex.meta.origin = Some(record.origin);
            out.push(ex);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::new("t")
            .with_label("PER", "A person.", "Include titles.")
            .with_label("LOC", "A place.", "Exclude adjectives.")
    }

    fn sentence(n: usize, spans: Vec<EntitySpan>) -> AnnotatedSentence {
        AnnotatedSentence::new(
            "s#0",
            (0..n).map(|i| format!("w{i}")).collect(),
            spans,
            "test",
        )
    }

    #[test]
    fn instruction_with_and_without_guidelines() {
        let with = build_instruction(&schema(), true);
        assert!(with.contains("Use the specific entity tags: PER, LOC, and O."));
        assert!(with.contains("\"PER\": {\n    \"DEFINITION\": \"A person.\",\n    \"GUIDELINES\": \"Include titles.\"\n  }"));
        assert!(with.contains("\"DEFINITION\": \"A place.\""));
        let without = build_instruction(&schema(), false);
        assert!(!without.contains("DEFINITION"));
        assert!(without.ends_with("and O."));
        assert_eq!(with, build_instruction(&schema(), true));
    }

    #[test]
    fn guideline_text_is_escaped() {
        let s = LabelSchema::new("t").with_label("Q", "say \"hi\"\nnow", "");
        assert!(build_instruction(&s, true).contains(r#""DEFINITION": "say \"hi\"\nnow""#));
    }

    #[test]
    fn heuristic_counter() {
        assert_eq!(count_tokens("", &HeuristicCounter), 0);
        assert_eq!(count_tokens("abcdefgh", &HeuristicCounter), 2);
        assert_eq!(count_tokens("abcdefghi", &HeuristicCounter), 3);
        assert_eq!(count_tokens("é", &HeuristicCounter), 1);
        assert_eq!(count_tokens(" a  b ", &WhitespaceCounter), 2);
    }

    #[test]
    fn short_sentence_single_example() {
        let s = AnnotatedSentence::new(
            "s#0",
            vec!["John".into(), "ran".into()],
            vec![EntitySpan::new(0, 1, "PER")],
            "",
        );
        let ex = build_example(&s, &schema(), true, &TokenBudget::default()).unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].input, "John ran");
        assert_eq!(ex[0].output, "John/PER, ran/O");
        assert_eq!(ex[0].meta.chunk, 0);
    }

    #[test]
    fn bio_targets() {
        let s = AnnotatedSentence::new(
            "s#0",
            vec!["Ann".into(), "Lee".into(), "ran".into()],
            vec![EntitySpan::new(0, 2, "PER")],
            "",
        );
        let schema = schema();
        let b = ExampleBuilder::new(&schema, false, TokenBudget::default())
            .unwrap()
            .with_scheme(TagScheme::Bio);
        assert_eq!(b.build(&s).unwrap()[0].output, "Ann/B-PER, Lee/I-PER, ran/O");
    }

    #[test]
    fn unknown_label_named() {
        let s = sentence(3, vec![EntitySpan::new(0, 1, "GENE")]);
        let err = build_example(&s, &schema(), true, &TokenBudget::default()).unwrap_err();
        assert!(matches!(err, PromptError::LabelNotInSchema { ref label, .. } if label == "GENE"));
    }

    fn tiny_budget(extra: usize) -> TokenBudget {
        let instr = build_instruction(&schema(), false);
        TokenBudget::new(WhitespaceCounter.count(&instr) + extra, Arc::new(WhitespaceCounter))
    }

    #[test]
    fn long_sentence_is_chunked_losslessly() {
        let s = sentence(600, vec![EntitySpan::new(10, 13, "PER")]);
        let budget = tiny_budget(40);
        let ex = build_example(&s, &schema(), false, &budget).unwrap();
        assert!(ex.len() >= 2);
        let joined: Vec<&str> = ex.iter().flat_map(|e| e.input.split(' ')).collect();
        assert_eq!(joined, s.tokens.iter().map(String::as_str).collect::<Vec<_>>());
        for (i, e) in ex.iter().enumerate() {
            assert_eq!(e.meta.chunk, i);
            assert!(budget.measure(e) <= budget.max_tokens);
        }
    }

    #[test]
    fn split_moves_before_entity() {
        // each window holds 10 words (10 input + 10 output); an entity at 8..12 straddles 10
        let s = sentence(20, vec![EntitySpan::new(8, 12, "LOC")]);
        let budget = tiny_budget(20);
        let ex = build_example(&s, &schema(), false, &budget).unwrap();
        assert_eq!(ex[0].input.split(' ').count(), 8);
        assert!(ex[1].input.starts_with("w8 w9 w10 w11"));
        assert!(ex[1].output.starts_with("w8/LOC, w9/LOC, w10/LOC, w11/LOC"));
    }

    #[test]
    fn oversized_units_error() {
        let s = sentence(20, vec![EntitySpan::new(0, 15, "LOC")]);
        let err = build_example(&s, &schema(), false, &tiny_budget(20)).unwrap_err();
        assert!(matches!(err, PromptError::EntityExceedsBudget { .. }));

        let s = sentence(5, vec![]);
        let err = build_example(&s, &schema(), false, &tiny_budget(1)).unwrap_err();
        assert!(matches!(err, PromptError::TokenExceedsBudget { index: 0, .. }));

        let err = ExampleBuilder::new(&schema(), true, TokenBudget::new(3, Arc::new(HeuristicCounter)))
            .unwrap_err();
        assert!(matches!(err, PromptError::InstructionExceedsBudget { .. }));
    }

    #[test]
    fn assembly_compositions() {
        let mk = |p: &str, n: usize| -> Vec<AnnotatedSentence> {
            (0..n)
                .map(|i| AnnotatedSentence::new(format!("{p}#{i}"), vec!["x".into()], vec![], p))
                .collect()
        };
        let gold = mk("gold", 100);
        let aug = mk("aug", 200);
        let d = assemble_dataset(&[], &gold, &aug, 0);
        assert_eq!(d.manifest.in_domain, 300);
        assert_eq!(d.manifest.duplicates, 0);

        let d = assemble_dataset(&[], &gold, &[], 2);
        assert_eq!(d.manifest.in_domain, 300);
        assert_eq!(d.manifest.duplicates, 200);
        assert_eq!(d.records[100].sentence.id, "gold#0::dup1");
        assert_eq!(d.records[299].sentence.id, "gold#99::dup2");
        assert!(d.records[100..].iter().all(|r| r.origin == Origin::Duplicate));

        let d = assemble_dataset(&[], &[], &[], 3);
        assert!(d.records.is_empty());
        assert_eq!(d.manifest.total, 0);
    }

    #[test]
    fn training_jsonl_layout() {
        let s = AnnotatedSentence::new("a", vec!["Hi".into()], vec![], "");
        let ex = build_example(&s, &schema(), false, &TokenBudget::default()).unwrap();
        let mut buf = Vec::new();
        write_training_jsonl(&mut buf, &ex).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("{\"instruction\":"));
        assert!(text.contains(",\"input\":\"Hi\",\"output\":\"Hi/O\",\"meta\":{\"id\":\"a\",\"chunk\":0}}\n"));
        let mut empty = Vec::new();
        write_training_jsonl(&mut empty, &[]).unwrap();
        assert!(empty.is_empty());
    }
}
