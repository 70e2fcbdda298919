//! Entity-level precision, recall and F1 with exact boundary and label match.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, EntitySpan};
use crate::tagfmt::{self, TagScheme};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("generation for unknown sentence id {0:?}")]
    UnknownId(String),
    #[error("duplicate generation for sentence id {0:?}")]
    DuplicateGeneration(String),
    #[error("generations line {line}: {message}")]
    Json { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn scores(self) -> LabelScores {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        LabelScores {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label counts for one sentence. Spans are compared as sets of
/// `(start, end, label)`, so duplicated predictions count once.
pub fn score_spans(gold: &[EntitySpan], predicted: &[EntitySpan]) -> BTreeMap<String, Counts> {
    let key = |s: &EntitySpan| (s.start, s.end, s.label.trim().to_string());
    let gold: BTreeSet<_> = gold.iter().map(key).collect();
    let pred: BTreeSet<_> = predicted.iter().map(key).collect();
    let mut out: BTreeMap<String, Counts> = BTreeMap::new();
    for g in &gold {
        let c = out.entry(g.2.clone()).or_default();
        if pred.contains(g) {
            c.tp += 1;
        } else {
            c.fn_ += 1;
        }
    }
    for p in pred.difference(&gold) {
        out.entry(p.2.clone()).or_default().fp += 1;
    }
    out
}

pub fn score_sentence(gold: &AnnotatedSentence, predicted: &[EntitySpan]) -> BTreeMap<String, Counts> {
    score_spans(&gold.spans, predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_label: BTreeMap<String, LabelScores>,
    pub micro: LabelScores,
    pub n_sentences: usize,
    /// Generated items that could not be read as `word/tag`, plus BIO repairs.
    pub irregular_outputs: usize,
    /// Gold sentences with no generation; all their entities count as misses.
    pub missing_generations: usize,
}

/// Running totals; feed sentences one by one, then call `finish`.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    per_label: BTreeMap<String, Counts>,
    n_sentences: usize,
    irregular: usize,
    missing: usize,
}

impl Accumulator {
    pub fn add_sentence(&mut self, gold: &[EntitySpan], predicted: &[EntitySpan]) {
        for (label, c) in score_spans(gold, predicted) {
            self.per_label.entry(label).or_default().add(c);
        }
        self.n_sentences += 1;
    }

    pub fn add_missing(&mut self, gold: &[EntitySpan]) {
        self.add_sentence(gold, &[]);
        self.missing += 1;
    }

    pub fn add_irregular(&mut self, n: usize) {
        self.irregular += n;
    }

    pub fn finish(self) -> EvalReport {
        let mut total = Counts::default();
        for c in self.per_label.values() {
            total.add(*c);
        }
        EvalReport {
            per_label: self
                .per_label
                .into_iter()
                .map(|(l, c)| (l, c.scores()))
                .collect(),
            micro: total.scores(),
            n_sentences: self.n_sentences,
            irregular_outputs: self.irregular,
            missing_generations: self.missing,
        }
    }
}

/// Scores pre-computed predictions, one span list per gold sentence.
pub fn evaluate_spans(gold: &[AnnotatedSentence], predicted: &[Vec<EntitySpan>]) -> EvalReport {
    let mut acc = Accumulator::default();
    for (g, p) in gold.iter().zip(predicted) {
        acc.add_sentence(&g.spans, p);
    }
    for g in gold.iter().skip(predicted.len()) {
        acc.add_missing(&g.spans);
    }
    acc.finish()
}

/// Predicted spans for one generation, projected onto the gold tokens.
/// Returns the spans and the number of irregular items.
pub fn generation_to_spans(
    gold: &AnnotatedSentence,
    generation: &str,
    scheme: TagScheme,
) -> (Vec<EntitySpan>, usize) {
    let parsed = match scheme {
        TagScheme::Flat => tagfmt::slash_to_tags(generation),
        TagScheme::Bio => tagfmt::parse_bio_generation(generation),
    };
    let aligned = tagfmt::align_predictions(&gold.tokens, &parsed.items);
    match scheme {
        TagScheme::Flat => (tagfmt::flat_tags_to_spans(&aligned.tags), parsed.irregular),
        TagScheme::Bio => {
            let (spans, repaired) = tagfmt::bio_to_spans_lenient(&aligned.tags);
            (spans, parsed.irregular + repaired)
        }
    }
}

/// Scores raw model generations keyed by sentence id.
pub fn evaluate_generations(
    gold: &[AnnotatedSentence],
    generations: &BTreeMap<String, String>,
    scheme: TagScheme,
) -> Result<EvalReport, EvalError> {
    let ids: HashSet<&str> = gold.iter().map(|s| s.id.as_str()).collect();
    if let Some(unknown) = generations.keys().find(|k| !ids.contains(k.as_str())) {
        return Err(EvalError::UnknownId(unknown.clone()));
    }
    let mut acc = Accumulator::default();
    for g in gold {
        match generations.get(&g.id) {
            Some(text) => {
                let (spans, irregular) = generation_to_spans(g, text, scheme);
                acc.add_sentence(&g.spans, &spans);
                acc.add_irregular(irregular);
            }
            None => acc.add_missing(&g.spans),
        }
    }
    Ok(acc.finish())
}

#[derive(Deserialize)]
struct GenerationLine {
    id: String,
    output: String,
}

/// Reads `{"id": .., "output": ..}` lines. Blank lines are skipped.
pub fn parse_generations<R: BufRead>(reader: R) -> Result<BTreeMap<String, String>, EvalError> {
    let mut out = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GenerationLine = serde_json::from_str(&line).map_err(|e| EvalError::Json {
            line: i + 1,
            message: e.to_string(),
        })?;
        if out.contains_key(&g.id) {
            return Err(EvalError::DuplicateGeneration(g.id));
        }
        out.insert(g.id, g.output);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

/// Text table with percentages to one decimal, or pretty JSON with raw ratios.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes"),
        ReportFormat::Text => {
            let width = report
                .per_label
                .keys()
                .map(|l| l.chars().count())
                .chain(["label".len(), "micro".len()])
                .max()
                .unwrap_or(5);
            let mut out = format!(
                "{:<width$}  {:>9}  {:>6}  {:>6}  {:>6}  {:>6}  {:>6}\n",
                "label", "precision", "recall", "f1", "tp", "fp", "fn"
            );
            let row = |name: &str, s: &LabelScores| {
                format!(
                    "{:<width$}  {:>9.1}  {:>6.1}  {:>6.1}  {:>6}  {:>6}  {:>6}\n",
                    name,
                    s.precision * 100.0,
                    s.recall * 100.0,
                    s.f1 * 100.0,
                    s.tp,
                    s.fp,
                    s.fn_
                )
            };
            for (label, s) in &report.per_label {
                out.push_str(&row(label, s));
            }
            out.push_str(&row("micro", &report.micro));
            out.push_str(&format!(
                "sentences: {}  irregular outputs: {}  missing generations: {}\n",
                report.n_sentences, report.irregular_outputs, report.missing_generations
            ));
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold() -> AnnotatedSentence {
        AnnotatedSentence::new(
            "g",
            "John Smith visited New York City today"
                .split(' ')
                .map(String::from)
                .collect(),
            vec![EntitySpan::new(0, 2, "PER"), EntitySpan::new(3, 6, "LOC")],
            "",
        )
    }

    #[test]
    fn boundary_must_match_exactly() {
        let c = score_sentence(&gold(), &[EntitySpan::new(0, 2, "PER"), EntitySpan::new(4, 6, "LOC")]);
        assert_eq!(c["PER"], Counts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(c["LOC"], Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn wrong_label_is_fp_and_fn() {
        let c = score_sentence(&gold(), &[EntitySpan::new(0, 2, "ORG")]);
        assert_eq!(c["ORG"].fp, 1);
        assert_eq!(c["PER"].fn_, 1);
    }

    #[test]
    fn duplicate_predictions_count_once() {
        let p = EntitySpan::new(0, 2, "PER");
        let c = score_sentence(&gold(), &[p.clone(), p]);
        assert_eq!(c["PER"], Counts { tp: 1, fp: 0, fn_: 0 });
    }

    #[test]
    fn zero_denominators() {
        let s = Counts::default().scores();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        let s = Counts { tp: 0, fp: 0, fn_: 3 }.scores();
        assert_eq!(s.f1, 0.0);
    }

    #[test]
    fn micro_f1_formula() {
        // tp 3, fp 1, fn 2: p = 0.75, r = 0.6, f1 = 2/3
        let s = Counts { tp: 3, fp: 1, fn_: 2 }.scores();
        assert!((s.precision - 0.75).abs() < 1e-12);
        assert!((s.recall - 0.6).abs() < 1e-12);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn generations_end_to_end() {
        let g = vec![gold()];
        let mut gens = BTreeMap::new();
        gens.insert(
            "g".to_string(),
            "John/PER, Smith/PER, visited/O, New/LOC, York/LOC, City/LOC, today/O".to_string(),
        );
        let r = evaluate_generations(&g, &gens, TagScheme::Flat).unwrap();
        assert_eq!(r.micro.f1, 1.0);
        assert_eq!(r.missing_generations, 0);

        let r = evaluate_generations(&g, &BTreeMap::new(), TagScheme::Flat).unwrap();
        assert_eq!(r.missing_generations, 1);
        assert_eq!(r.micro.fn_, 2);

        gens.insert("nope".into(), "x/O".into());
        assert!(matches!(
            evaluate_generations(&g, &gens, TagScheme::Flat),
            Err(EvalError::UnknownId(id)) if id == "nope"
        ));
    }

    #[test]
    fn bio_generation() {
        let g = vec![gold()];
        let mut gens = BTreeMap::new();
        gens.insert(
            "g".to_string(),
            "John/B-PER, Smith/I-PER, visited/O, New/B-LOC, York/I-LOC, City/I-LOC, today/O".to_string(),
        );
        let r = evaluate_generations(&g, &gens, TagScheme::Bio).unwrap();
        assert_eq!(r.micro.tp, 2);
        assert_eq!(r.irregular_outputs, 0);
    }

    #[test]
    fn text_and_json_reports() {
        let r = evaluate_spans(&[gold()], &[vec![EntitySpan::new(0, 2, "PER")]]);
        let text = render_report(&r, ReportFormat::Text);
        assert!(text.contains("PER"));
        assert!(text.contains("100.0"));
        assert!(text.lines().any(|l| l.starts_with("micro") && l.contains("66.7")));
        let json: serde_json::Value =
            serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(json["micro"]["fn"], 1);
        assert_eq!(json["per_label"]["LOC"]["recall"], 0.0);
    }

    #[test]
    fn generations_reader() {
        let text = "{\"id\":\"a\",\"output\":\"x/O\"}\n\n{\"id\":\"b\",\"output\":\"\"}\n";
        let g = parse_generations(text.as_bytes()).unwrap();
        assert_eq!(g.len(), 2);
        let dup = "{\"id\":\"a\",\"output\":\"\"}\n{\"id\":\"a\",\"output\":\"\"}\n";
        assert!(matches!(
            parse_generations(dup.as_bytes()),
            Err(EvalError::DuplicateGeneration(_))
        ));
    }
}
