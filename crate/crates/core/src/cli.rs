//! `nerkit` subcommands: filter, augment, build-dataset, evaluate, report.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage or config error.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, AnnotatedSentence, ColumnSeparator, ConllOptions, FilterCriteria, LabelSchema};
use crate::eval::{self, EvalReport, ReportFormat};
use crate::llm::{Endpoint, HttpChatClient, LlmClient, ScriptedClient};
use crate::paraphrase::{self, ParaphraseConfig};
use crate::prompt::{self, ExampleBuilder, HeuristicCounter, TokenBudget, TokenCounter, WhitespaceCounter};
use crate::tagfmt::TagScheme;
use crate::validate::{Embedder, RemoteEmbedder, TfEmbedder};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, missing inputs, invalid config. Exit 2.
    Usage(String),
    /// Anything that fails while doing the work. Exit 1.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Failed(m) => m,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "nerkit", version, about = "NER corpus filtering, paraphrase augmentation, instruction datasets and scoring")]
pub struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for sampling; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse a corpus, drop sentences failing the filter, optionally sample.
    Filter(FilterArgs),
    /// Generate paraphrase variants of gold sentences through an LLM.
    Augment(AugmentArgs),
    /// Assemble a training set and emit instruction JSONL.
    BuildDataset(BuildArgs),
    /// Score generations against gold.
    Evaluate(EvaluateArgs),
    /// Print saved evaluation reports side by side.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Conll,
    Jsonl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Flat,
    Bio,
}

impl From<FormatArg> for TagScheme {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Flat => TagScheme::Flat,
            FormatArg::Bio => TagScheme::Bio,
        }
    }
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Corpus file; defaults to `paths.corpus` from the config.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Guessed from the extension when absent (`.jsonl` or CoNLL).
    #[arg(long, value_enum)]
    pub input_format: Option<InputFormat>,
    /// Source name stamped on sentences; defaults to the file stem.
    #[arg(long)]
    pub source: Option<String>,
    /// Keep a uniform sample of this many filtered sentences.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub min_words: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// Gold JSONL.
    #[arg(long)]
    pub input: PathBuf,
    /// Scripted-response fixture instead of a live endpoint.
    #[arg(long)]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub variants: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub augmented: Option<PathBuf>,
    /// Label schema JSON; defaults to `paths.schema` from the config.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Extra copies of the gold set.
    #[arg(long, default_value_t = 0)]
    pub duplicate: usize,
    /// Omit per-label definitions and guidelines from the instruction.
    #[arg(long)]
    pub no_guidelines: bool,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, value_enum, default_value = "flat")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gold: PathBuf,
    /// JSONL of `{"id", "output"}`.
    #[arg(long)]
    pub generations: PathBuf,
    #[arg(long, value_enum, default_value = "flat")]
    pub format: FormatArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// One or more `report.json` files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub min_words: usize,
    pub english_only: bool,
    pub labels: Option<Vec<String>>,
    pub drop_entityless: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let d = FilterCriteria::default();
        Self {
            min_words: d.min_words,
            english_only: d.english_only,
            labels: None,
            drop_entityless: d.drop_entityless,
        }
    }
}

impl FilterConfig {
    pub fn criteria(&self) -> FilterCriteria {
        FilterCriteria {
            min_words: self.min_words,
            english_only: self.english_only,
            label_allowlist: self.labels.as_ref().map(|l| l.iter().cloned().collect()),
            drop_entityless: self.drop_entityless,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CounterKind {
    /// ceil(bytes / 4)
    #[default]
    Heuristic,
    Whitespace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub max_tokens: usize,
    pub counter: CounterKind,
    pub include_guidelines: bool,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            max_tokens: 2048,
            counter: CounterKind::Heuristic,
            include_guidelines: true,
        }
    }
}

impl BudgetConfig {
    pub fn budget(&self) -> TokenBudget {
        let counter: Arc<dyn TokenCounter> = match self.counter {
            CounterKind::Heuristic => Arc::new(HeuristicCounter),
            CounterKind::Whitespace => Arc::new(WhitespaceCounter),
        };
        TokenBudget::new(self.max_tokens, counter)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    #[default]
    Tf,
    Remote,
}

/// Endpoint settings. The key itself is only ever read from `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub base_url: String,
    pub api_key_env: String,
    pub embedder: EmbedderKind,
    pub embedding_model: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:8000/v1".into(),
            api_key_env: "NERKIT_API_KEY".into(),
            embedder: EmbedderKind::Tf,
            embedding_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub filter: FilterConfig,
    pub paraphrase: ParaphraseConfig,
    pub budget: BudgetConfig,
    pub llm: LlmConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: PathsConfig::default(),
            filter: FilterConfig::default(),
            paraphrase: ParaphraseConfig::default(),
            budget: BudgetConfig::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parses TOML and checks that referenced input paths exist. Relative
    /// paths resolve against the config file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_input(path)?;
        let mut cfg: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.schema, &mut cfg.paths.output]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&cfg.paths.corpus, &cfg.paths.schema].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Usage(format!(
                    "{}: referenced path {} does not exist",
                    path.display(),
                    p.display()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.paraphrase
            .validate()
            .map_err(|e| CliError::Usage(format!("paraphrase config: {e}")))?;
        if self.budget.max_tokens == 0 {
            return Err(CliError::Usage("budget.max_tokens must be positive".into()));
        }
        Ok(())
    }
}

fn read_input(path: &Path) -> CliResult<String> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("input file not found: {}", path.display())));
    }
    fs::read_to_string(path).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn read_sentences(path: &Path) -> CliResult<Vec<AnnotatedSentence>> {
    let text = read_input(path)?;
    corpus::parse_jsonl_str(&text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn read_schema(path: &Path) -> CliResult<LabelSchema> {
    let text = read_input(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    LabelSchema::from_json_str(name, &text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(failed)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| failed(format!("{}: {e}", path.display())))
}

fn write_sentences(path: &Path, sentences: &[AnnotatedSentence]) -> CliResult<()> {
    corpus::write_jsonl(create_file(path)?, sentences).map_err(|e| failed(format!("{}: {e}", path.display())))
}

struct Context {
    config: PipelineConfig,
    output: PathBuf,
}

impl Context {
    fn new(cli: &Cli) -> CliResult<Self> {
        let mut config = match &cli.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(seed) = cli.seed {
            config.seed = seed;
        }
        let output = cli
            .output
            .clone()
            .or_else(|| config.paths.output.clone())
            .ok_or_else(|| CliError::Usage("no output directory: pass --output or set paths.output".into()))?;
        Ok(Self { config, output })
    }

    fn out(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.output).map_err(|e| failed(format!("{}: {e}", self.output.display())))?;
        Ok(self.output.join(name))
    }
}

#[derive(Debug, Serialize)]
struct FilterReport {
    input: String,
    seed: u64,
    total: usize,
    kept: usize,
    rejected: usize,
    by_reason: BTreeMap<&'static str, usize>,
    sampled: Option<usize>,
    rejections: Vec<RejectionLine>,
}

#[derive(Debug, Serialize)]
struct RejectionLine {
    id: String,
    reason: &'static str,
}

pub fn cmd_filter(cli: &Cli, args: &FilterArgs) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    let input = args
        .input
        .clone()
        .or_else(|| ctx.config.paths.corpus.clone())
        .ok_or_else(|| CliError::Usage("no input corpus: pass --input or set paths.corpus".into()))?;
    let text = read_input(&input)?;
    let source = args.source.clone().unwrap_or_else(|| {
        input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "corpus".into())
    });
    let format = args.input_format.unwrap_or_else(|| {
        match input.extension().and_then(|e| e.to_str()) {
            Some("jsonl") => InputFormat::Jsonl,
            _ => InputFormat::Conll,
        }
    });
    let sentences = match format {
        InputFormat::Jsonl => corpus::parse_jsonl_str(&text),
        InputFormat::Conll => corpus::parse_conll(
            &text,
            &source,
            ConllOptions {
                separator: ColumnSeparator::Whitespace,
                ..ConllOptions::default()
            },
        ),
    }
    .map_err(|e| failed(format!("{}: {e}", input.display())))?;

    let mut criteria = ctx.config.filter.criteria();
    if let Some(n) = args.min_words {
        criteria.min_words = n;
    }
    let outcome = corpus::filter_corpus(&sentences, &criteria);
    let kept = match args.sample {
        Some(n) => corpus::sample_corpus(&outcome.kept, n, ctx.config.seed).map_err(failed)?,
        None => outcome.kept.clone(),
    };

    let mut by_reason = BTreeMap::new();
    for r in &outcome.rejected {
        *by_reason.entry(r.reason.as_str()).or_insert(0) += 1;
    }
    let report = FilterReport {
        input: input.display().to_string(),
        seed: ctx.config.seed,
        total: sentences.len(),
        kept: outcome.kept.len(),
        rejected: outcome.rejected.len(),
        by_reason,
        sampled: args.sample.map(|_| kept.len()),
        rejections: outcome
            .rejected
            .iter()
            .map(|r| RejectionLine {
                id: r.sentence.id.clone(),
                reason: r.reason.as_str(),
            })
            .collect(),
    };
    write_sentences(&ctx.out("kept.jsonl")?, &kept)?;
    write_json(&ctx.out("filter_report.json")?, &report)?;
    println!(
        "filter: {} sentences, {} kept, {} rejected, {} written",
        report.total,
        report.kept,
        report.rejected,
        kept.len()
    );
    Ok(())
}

pub fn cmd_augment(cli: &Cli, args: &AugmentArgs) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    let mut config = ctx.config.paraphrase.clone();
    if let Some(n) = args.variants {
        config.n_variants = n;
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("paraphrase config: {e}")))?;
    let gold = read_sentences(&args.input)?;

    let llm = &ctx.config.llm;
    let endpoint = Endpoint::new(llm.base_url.clone())
        .with_api_key_from_env(&llm.api_key_env)
        .with_timeout(config.request_timeout);
    let client: Box<dyn LlmClient> = match &args.mock {
        Some(path) => {
            let text = read_input(path)?;
            let scripted = ScriptedClient::from_jsonl(text.as_bytes())
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            Box::new(scripted)
        }
        None => Box::new(HttpChatClient::new(endpoint.clone())),
    };
    let embedder: Box<dyn Embedder> = match llm.embedder {
        EmbedderKind::Tf => Box::new(TfEmbedder),
        EmbedderKind::Remote => Box::new(RemoteEmbedder {
            endpoint,
            model: llm.embedding_model.clone(),
        }),
    };

    let (records, summary) = paraphrase::augment_corpus(&gold, &config, client.as_ref(), embedder.as_ref());
    let variants = paraphrase::collect_variants(&records);
    write_sentences(&ctx.out("variants.jsonl")?, &variants)?;
    let mut w = create_file(&ctx.out("augment_records.jsonl")?)?;
    for r in &records {
        serde_json::to_writer(&mut w, r).map_err(failed)?;
        w.write_all(b"\n").map_err(failed)?;
    }
    w.flush().map_err(failed)?;
    write_json(&ctx.out("augment_summary.json")?, &summary)?;
    println!(
        "augment: {} inputs, {} variants kept, {} failed, first-attempt failure rate {:.3}",
        summary.inputs, summary.variants_kept, summary.failed, summary.failure_first_attempt
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BuildManifest {
    #[serde(flatten)]
    counts: prompt::Manifest,
    examples: usize,
    chunked_sentences: usize,
    instruction_tokens: usize,
    max_example_tokens: usize,
    max_tokens: usize,
    counter: CounterKind,
    include_guidelines: bool,
    format: TagScheme,
}

pub fn cmd_build_dataset(cli: &Cli, args: &BuildArgs) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    let schema_path = args
        .schema
        .clone()
        .or_else(|| ctx.config.paths.schema.clone())
        .ok_or_else(|| CliError::Usage("no schema: pass --schema or set paths.schema".into()))?;
    let schema = read_schema(&schema_path)?;
    let gold = read_sentences(&args.gold)?;
    let base = args.base.as_deref().map(read_sentences).transpose()?.unwrap_or_default();
    let augmented = args
        .augmented
        .as_deref()
        .map(read_sentences)
        .transpose()?
        .unwrap_or_default();

    let mut budget_cfg = ctx.config.budget.clone();
    if let Some(m) = args.max_tokens {
        budget_cfg.max_tokens = m;
    }
    let include_guidelines = budget_cfg.include_guidelines && !args.no_guidelines;
    let budget = budget_cfg.budget();
    let builder = ExampleBuilder::new(&schema, include_guidelines, budget.clone())
        .map_err(failed)?
        .with_scheme(args.format.into());

    let dataset = prompt::assemble_dataset(&base, &gold, &augmented, args.duplicate);
    let examples = prompt::build_dataset_examples(&dataset, &builder).map_err(failed)?;
    let chunked_sentences = examples.iter().filter(|e| e.meta.chunk == 1).count();
    let manifest = BuildManifest {
        counts: dataset.manifest.clone(),
        examples: examples.len(),
        chunked_sentences,
        instruction_tokens: builder.instruction_tokens(),
        max_example_tokens: examples.iter().map(|e| budget.measure(e)).max().unwrap_or(0),
        max_tokens: budget.max_tokens,
        counter: budget_cfg.counter,
        include_guidelines,
        format: args.format.into(),
    };
    prompt::write_training_jsonl(create_file(&ctx.out("train.jsonl")?)?, &examples).map_err(failed)?;
    write_json(&ctx.out("manifest.json")?, &manifest)?;
    println!(
        "build-dataset: {} records ({} base, {} gold, {} augmented, {} duplicates), {} examples",
        manifest.counts.total,
        manifest.counts.base,
        manifest.counts.gold,
        manifest.counts.augmented,
        manifest.counts.duplicates,
        manifest.examples
    );
    Ok(())
}

pub fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> CliResult<()> {
    let ctx = Context::new(cli)?;
    let gold = read_sentences(&args.gold)?;
    let text = read_input(&args.generations)?;
    let generations = eval::parse_generations(text.as_bytes())
        .map_err(|e| failed(format!("{}: {e}", args.generations.display())))?;
    let report = eval::evaluate_generations(&gold, &generations, args.format.into()).map_err(failed)?;
    let table = eval::render_report(&report, ReportFormat::Text);
    let mut json = eval::render_report(&report, ReportFormat::Json);
    json.push('\n');
    fs::write(ctx.out("report.json")?, json).map_err(failed)?;
    fs::write(ctx.out("report.txt")?, &table).map_err(failed)?;
    print!("{table}");
    Ok(())
}

/// One row per report: micro precision, recall and F1 as percentages.
pub fn render_comparison(reports: &[(String, EvalReport)]) -> String {
    let width = reports
        .iter()
        .map(|(n, _)| n.chars().count())
        .chain(["report".len()])
        .max()
        .unwrap_or(6);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>6}  {:>6}  {:>9}\n",
        "report", "precision", "recall", "f1", "sentences"
    );
    for (name, r) in reports {
        out.push_str(&format!(
            "{:<width$}  {:>9.1}  {:>6.1}  {:>6.1}  {:>9}\n",
            name,
            r.micro.precision * 100.0,
            r.micro.recall * 100.0,
            r.micro.f1 * 100.0,
            r.n_sentences
        ));
    }
    out
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    for path in &args.reports {
        let text = read_input(path)?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| failed(format!("{}: {e}", path.display())))?;
        reports.push((path.display().to_string(), report));
    }
    print!("{}", render_comparison(&reports));
    Ok(())
}

pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Filter(a) => cmd_filter(cli, a),
        Command::Augment(a) => cmd_augment(cli, a),
        Command::BuildDataset(a) => cmd_build_dataset(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `std::env::args`, runs the subcommand, maps errors to exit codes.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("nerkit: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
