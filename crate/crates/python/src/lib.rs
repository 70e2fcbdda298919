use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

use ::nerkit::corpus::{self, AnnotatedSentence, ColumnSeparator, ConllOptions, EntitySpan, FilterCriteria};
use ::nerkit::eval::{self, ReportFormat};
use ::nerkit::llm::{Endpoint, HttpChatClient, LlmClient, ScriptedClient};
use ::nerkit::mask::{self, MaskedTemplate};
use ::nerkit::paraphrase::{self, ParaphraseConfig};
use ::nerkit::prompt::{self, ExampleBuilder, HeuristicCounter, TokenBudget};
use ::nerkit::tagfmt::{self, TagScheme};
use ::nerkit::validate::TfEmbedder;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Hands serde output to Python as plain dicts and lists.
fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn scheme(format: &str) -> PyResult<TagScheme> {
    match format {
        "flat" => Ok(TagScheme::Flat),
        "bio" => Ok(TagScheme::Bio),
        other => Err(PyValueError::new_err(format!("format must be 'flat' or 'bio', not {other:?}"))),
    }
}

/// A tokenized sentence with half-open entity spans.
#[pyclass(name = "Sentence", module = "nerkit", from_py_object)]
#[derive(Clone)]
struct PySentence {
    inner: AnnotatedSentence,
}

#[pymethods]
impl PySentence {
    #[new]
    #[pyo3(signature = (id, tokens, spans=Vec::new(), source=String::new()))]
    fn new(id: String, tokens: Vec<String>, spans: Vec<(usize, usize, String)>, source: String) -> PyResult<Self> {
        let spans = spans.into_iter().map(|(s, e, l)| EntitySpan::new(s, e, l)).collect();
        let inner = AnnotatedSentence::new(id, tokens, spans, source);
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(line: &str) -> PyResult<Self> {
        let mut parsed = corpus::parse_jsonl_str(line).map_err(value_err)?;
        match parsed.len() {
            1 => Ok(Self { inner: parsed.remove(0) }),
            n => Err(PyValueError::new_err(format!("expected one sentence, got {n}"))),
        }
    }

    fn to_json(&self) -> String {
        corpus::emit_jsonl(std::slice::from_ref(&self.inner)).trim_end().to_string()
    }

    #[getter]
    fn id(&self) -> &str {
        &self.inner.id
    }

    #[getter]
    fn tokens(&self) -> Vec<String> {
        self.inner.tokens.clone()
    }

    #[getter]
    fn spans(&self) -> Vec<(usize, usize, String)> {
        self.inner
            .spans
            .iter()
            .map(|s| (s.start, s.end, s.label.clone()))
            .collect()
    }

    #[getter]
    fn source(&self) -> &str {
        &self.inner.source
    }

    fn text(&self) -> String {
        self.inner.text()
    }

    fn bio_tags(&self) -> Vec<String> {
        tagfmt::spans_to_bio(&self.inner).tags
    }

    /// `word/label, ...` target string.
    fn slash(&self) -> String {
        tagfmt::spans_to_slash(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.tokens.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let spans: Vec<String> = self.inner.spans.iter().map(ToString::to_string).collect();
        format!("Sentence(id={:?}, tokens={}, spans=[{}])", self.inner.id, self.inner.tokens.len(), spans.join(", "))
    }
}

fn unwrap_all(sentences: Vec<PySentence>) -> Vec<AnnotatedSentence> {
    sentences.into_iter().map(|s| s.inner).collect()
}

fn wrap_all(sentences: Vec<AnnotatedSentence>) -> Vec<PySentence> {
    sentences.into_iter().map(|inner| PySentence { inner }).collect()
}

/// Entity-type inventory with per-label definitions and guidelines.
#[pyclass(name = "LabelSchema", module = "nerkit", from_py_object)]
#[derive(Clone)]
struct PyLabelSchema {
    inner: corpus::LabelSchema,
}

#[pymethods]
impl PyLabelSchema {
    #[staticmethod]
    #[pyo3(signature = (text, name="schema"))]
    fn from_json(text: &str, name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: corpus::LabelSchema::from_json_str(name, text).map_err(value_err)?,
        })
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.label_names().map(String::from).collect()
    }

    #[pyo3(signature = (include_guidelines=true))]
    fn instruction(&self, include_guidelines: bool) -> String {
        prompt::build_instruction(&self.inner, include_guidelines)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Sentence with entities replaced by `<<LABEL>>` placeholders.
#[pyclass(name = "MaskedTemplate", module = "nerkit")]
struct PyMaskedTemplate {
    inner: MaskedTemplate,
}

#[pymethods]
impl PyMaskedTemplate {
    fn render(&self) -> String {
        mask::render_template(&self.inner)
    }

    /// Puts the original entity surfaces back into a paraphrase.
    #[pyo3(signature = (variant, index=0))]
    fn reinject(&self, variant: &str, index: usize) -> PyResult<PySentence> {
        let inner = mask::reinject_entities(variant, &self.inner, index).map_err(value_err)?;
        Ok(PySentence { inner })
    }

    fn tag_count_ok(&self, variant: &str) -> bool {
        ::nerkit::validate::check_tag_count(&self.inner, variant).ok
    }
}

#[pyfunction]
#[pyo3(signature = (text, source="corpus"))]
fn parse_conll(text: &str, source: &str) -> PyResult<Vec<PySentence>> {
    let opts = ConllOptions {
        separator: ColumnSeparator::Whitespace,
        ..ConllOptions::default()
    };
    Ok(wrap_all(corpus::parse_conll(text, source, opts).map_err(value_err)?))
}

#[pyfunction]
fn parse_jsonl(text: &str) -> PyResult<Vec<PySentence>> {
    Ok(wrap_all(corpus::parse_jsonl_str(text).map_err(value_err)?))
}

#[pyfunction]
fn emit_jsonl(sentences: Vec<PySentence>) -> String {
    corpus::emit_jsonl(&unwrap_all(sentences))
}

/// Returns `(kept, [(id, reason), ...])`.
#[pyfunction]
#[pyo3(signature = (sentences, min_words=10, english_only=true, labels=None, drop_entityless=false))]
fn filter_corpus(
    sentences: Vec<PySentence>,
    min_words: usize,
    english_only: bool,
    labels: Option<Vec<String>>,
    drop_entityless: bool,
) -> (Vec<PySentence>, Vec<(String, &'static str)>) {
    let criteria = FilterCriteria {
        min_words,
        english_only,
        label_allowlist: labels.map(|l| l.into_iter().collect()),
        drop_entityless,
    };
    let out = corpus::filter_corpus(&unwrap_all(sentences), &criteria);
    let rejected = out
        .rejected
        .into_iter()
        .map(|r| (r.sentence.id, r.reason.as_str()))
        .collect();
    (wrap_all(out.kept), rejected)
}

#[pyfunction]
fn sample_corpus(sentences: Vec<PySentence>, n: usize, seed: u64) -> PyResult<Vec<PySentence>> {
    Ok(wrap_all(
        corpus::sample_corpus(&unwrap_all(sentences), n, seed).map_err(value_err)?,
    ))
}

/// Returns `([(word, tag), ...], irregular_count)`. Never raises.
#[pyfunction]
fn slash_to_tags(text: &str) -> (Vec<(String, String)>, usize) {
    let parsed = tagfmt::slash_to_tags(text);
    (parsed.items, parsed.irregular)
}

#[pyfunction]
fn mask_entities(sentence: PySentence) -> PyResult<PyMaskedTemplate> {
    Ok(PyMaskedTemplate {
        inner: mask::mask_entities(&sentence.inner).map_err(value_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (response, expected))]
fn parse_variants(response: &str, expected: usize) -> PyResult<Vec<String>> {
    paraphrase::parse_variants(response, expected).map_err(value_err)
}

/// Instruction records for one sentence, chunked to the token budget.
#[pyfunction]
#[pyo3(signature = (sentence, schema, include_guidelines=true, max_tokens=2048, format="flat"))]
fn build_examples<'py>(
    py: Python<'py>,
    sentence: PySentence,
    schema: PyLabelSchema,
    include_guidelines: bool,
    max_tokens: usize,
    format: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let budget = TokenBudget::new(max_tokens, Arc::new(HeuristicCounter));
    let builder = ExampleBuilder::new(&schema.inner, include_guidelines, budget)
        .map_err(value_err)?
        .with_scheme(scheme(format)?);
    to_py(py, &builder.build(&sentence.inner).map_err(value_err)?)
}

type Assembled<'py> = (Vec<(String, PySentence)>, Bound<'py, PyAny>);

/// Returns `(records, manifest)`; records are `(origin, sentence)` pairs.
#[pyfunction]
#[pyo3(signature = (gold, base=Vec::new(), augmented=Vec::new(), duplication_factor=0))]
fn assemble_dataset<'py>(
    py: Python<'py>,
    gold: Vec<PySentence>,
    base: Vec<PySentence>,
    augmented: Vec<PySentence>,
    duplication_factor: usize,
) -> PyResult<Assembled<'py>> {
    let d = prompt::assemble_dataset(
        &unwrap_all(base),
        &unwrap_all(gold),
        &unwrap_all(augmented),
        duplication_factor,
    );
    let manifest = to_py(py, &d.manifest)?;
    let records = d
        .records
        .into_iter()
        .map(|r| {
            let origin = serde_json::to_value(r.origin)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default();
            (origin, PySentence { inner: r.sentence })
        })
        .collect();
    Ok((records, manifest))
}

/// Scores `{id: generation}` against gold; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (gold, generations, format="flat"))]
fn evaluate<'py>(
    py: Python<'py>,
    gold: Vec<PySentence>,
    generations: BTreeMap<String, String>,
    format: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let report = eval::evaluate_generations(&unwrap_all(gold), &generations, scheme(format)?).map_err(value_err)?;
    to_py(py, &report)
}

/// Same scoring, rendered as the text table.
#[pyfunction]
#[pyo3(signature = (gold, generations, format="flat"))]
fn evaluate_table(gold: Vec<PySentence>, generations: BTreeMap<String, String>, format: &str) -> PyResult<String> {
    let report = eval::evaluate_generations(&unwrap_all(gold), &generations, scheme(format)?).map_err(value_err)?;
    Ok(eval::render_report(&report, ReportFormat::Text))
}

/// Paraphrase augmentation. Uses the scripted fixture when `mock_script`
/// (JSONL text) is given, otherwise the chat endpoint at `base_url` with the
/// key read from the `api_key_env` environment variable.
#[pyfunction]
#[pyo3(signature = (
    sentences,
    n_variants=2,
    mock_script=None,
    base_url="http://localhost:8000/v1",
    api_key_env="NERKIT_API_KEY",
    max_parallel_requests=4,
    timeout_secs=60.0,
))]
#[allow(clippy::too_many_arguments)]
fn augment<'py>(
    py: Python<'py>,
    sentences: Vec<PySentence>,
    n_variants: usize,
    mock_script: Option<&str>,
    base_url: &str,
    api_key_env: &str,
    max_parallel_requests: usize,
    timeout_secs: f64,
) -> PyResult<(Vec<PySentence>, Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let timeout = Duration::try_from_secs_f64(timeout_secs).map_err(value_err)?;
    let config = ParaphraseConfig {
        n_variants,
        max_parallel_requests,
        request_timeout: timeout,
        ..ParaphraseConfig::default()
    };
    config.validate().map_err(value_err)?;
    let client: Box<dyn LlmClient> = match mock_script {
        Some(text) => Box::new(ScriptedClient::from_jsonl(text.as_bytes()).map_err(value_err)?),
        None => Box::new(HttpChatClient::new(
            Endpoint::new(base_url)
                .with_api_key_from_env(api_key_env)
                .with_timeout(timeout),
        )),
    };
    let gold = unwrap_all(sentences);
    let (records, summary) = py.detach(|| paraphrase::augment_corpus(&gold, &config, client.as_ref(), &TfEmbedder));
    let variants = wrap_all(paraphrase::collect_variants(&records));
    Ok((variants, to_py(py, &records)?, to_py(py, &summary)?))
}

#[pymodule]
fn nerkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySentence>()?;
    m.add_class::<PyLabelSchema>()?;
    m.add_class::<PyMaskedTemplate>()?;
    m.add_function(wrap_pyfunction!(parse_conll, m)?)?;
    m.add_function(wrap_pyfunction!(parse_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(emit_jsonl, m)?)?;
    m.add_function(wrap_pyfunction!(filter_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(sample_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(slash_to_tags, m)?)?;
    m.add_function(wrap_pyfunction!(mask_entities, m)?)?;
    m.add_function(wrap_pyfunction!(parse_variants, m)?)?;
    m.add_function(wrap_pyfunction!(build_examples, m)?)?;
    m.add_function(wrap_pyfunction!(assemble_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_table, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    Ok(())
}
