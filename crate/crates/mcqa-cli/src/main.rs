//! Command-line runner: accuracy evaluations, ordering-agreement (PPA)
//! measurements, dataset validation and canonical-format import.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 backend
//! error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use mcqa::ppa::PpaError;
use mcqa::{
    emit_report, load_dataset, load_dataset_with_pool, ppa_for_dataset, sample_instances,
    validate_dataset, write_questions, AnswerBinding, BackendConfig, DataError, Dataset,
    EvalConfig, EvalReport, McpProtocol, PassageKind, Question, ReportFormat, RunError, Shots,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_BACKEND: u8 = 4;

#[derive(Parser)]
#[command(
    name = "mcqa",
    version,
    about = "Evaluate completion-style language models on multiple-choice QA"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an accuracy evaluation (cloze or multiple-choice prompting)
    Eval(Box<EvalArgs>),
    /// Measure answer-order agreement (proportion of plurality agreement)
    Ppa(Box<PpaArgs>),
    /// Check dataset invariants and print an option-count histogram
    Validate(ValidateArgs),
    /// Convert a third-party JSONL layout to the canonical record format
    Import(ImportArgs),
}

#[derive(Args, Clone, Default)]
struct BackendFlags {
    /// Backend kind: mock:uniform, mock:first-symbol, mock:oracle,
    /// mock:seeded-hash, mock:length, or remote
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    model_id: Option<String>,
    /// Completions endpoint URL (remote backend)
    #[arg(long)]
    endpoint: Option<String>,
    /// Requests per minute for the rate limiter
    #[arg(long)]
    rpm: Option<f64>,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Alternatives requested at the answer position
    #[arg(long)]
    top_k: Option<usize>,
    /// Logprob assigned to symbols missing from the returned top-k
    #[arg(long)]
    floor: Option<f64>,
    /// Treat symbols missing from top-k as an error instead of flooring
    #[arg(long)]
    no_floor: bool,
    /// Directory for the content-addressed response cache
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Symbol surface form: leading_space, plain, or sum_variants
    #[arg(long)]
    symbol_mode: Option<String>,
    /// Vocabulary size of the uniform mock
    #[arg(long)]
    vocab_size: Option<usize>,
    /// Seed of the seeded-hash mock
    #[arg(long)]
    mock_seed: Option<u64>,
}

impl BackendFlags {
    fn apply(&self, config: &mut BackendConfig) -> anyhow::Result<()> {
        if let Some(kind) = &self.backend {
            config.kind = kind.clone();
        }
        if let Some(model_id) = &self.model_id {
            config.model_id = model_id.clone();
        }
        if let Some(endpoint) = &self.endpoint {
            config.endpoint = Some(endpoint.clone());
        }
        if let Some(rpm) = self.rpm {
            config.requests_per_minute = rpm;
        }
        if let Some(max_in_flight) = self.max_in_flight {
            config.max_in_flight = max_in_flight;
        }
        if let Some(top_k) = self.top_k {
            config.top_k = top_k;
        }
        if let Some(floor) = self.floor {
            config.floor_logprob = Some(floor);
        }
        if self.no_floor {
            config.floor_logprob = None;
        }
        if let Some(cache_dir) = &self.cache_dir {
            config.cache_dir = Some(cache_dir.clone());
        }
        if let Some(mode) = &self.symbol_mode {
            config.symbol_mode = serde_json::from_value(serde_json::json!(mode)).map_err(|_| {
                anyhow::anyhow!(
                    "unknown symbol mode {mode:?} (leading_space|plain|sum_variants)"
                )
            })?;
        }
        if let Some(vocab_size) = self.vocab_size {
            config.vocab_size = vocab_size;
        }
        if let Some(mock_seed) = self.mock_seed {
            config.mock_seed = mock_seed;
        }
        Ok(())
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Flat key-value config file (TOML); flags below override its fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Exemplar pool file (ids must be disjoint from the dataset)
    #[arg(long)]
    pool: Option<PathBuf>,
    /// mcp or cp
    #[arg(long)]
    protocol: Option<String>,
    /// raw, ln, un, or best_of_all
    #[arg(long)]
    cp_strategy: Option<String>,
    /// Exemplar count: a number, or "max" to pack up to the token budget
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    token_budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, caps, or space
    #[arg(long)]
    corruption: Option<String>,
    #[arg(long)]
    corruption_seed: Option<u64>,
    /// Permute options so the gold answer changes index
    #[arg(long)]
    strong_shuffle: bool,
    /// Evaluate a seeded random subset of this size
    #[arg(long)]
    sample: Option<usize>,
    /// Record per-question failures instead of aborting
    #[arg(long)]
    skip_errors: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Append finished records to this JSONL file while running
    #[arg(long)]
    partial: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendFlags,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// table, tsv, or json
    #[arg(long, default_value = "table")]
    format: String,
}

#[derive(Args)]
struct PpaArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Fixed exemplar count rendered before every ordering
    #[arg(long, default_value_t = 0)]
    shots: usize,
    /// Permutation cap; 720 fully enumerates up to six options
    #[arg(long, default_value_t = 720)]
    cap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    skip_errors: bool,
    #[command(flatten)]
    backend: BackendFlags,
    /// Write the agreement table here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Args)]
struct ImportArgs {
    /// Source JSONL file, one record per line
    #[arg(long)]
    input: PathBuf,
    /// Destination canonical JSONL file
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "id")]
    id_field: String,
    #[arg(long, default_value = "question")]
    stem_field: String,
    /// Options field: a JSON list of strings, or an object with text/label
    /// arrays
    #[arg(long, default_value = "choices")]
    options_field: String,
    /// Gold field: an option index, a symbol letter, or the exact option text
    #[arg(long, default_value = "answerKey")]
    gold_field: String,
    #[arg(long)]
    passage_field: Option<String>,
    /// passage, story, or dialogue
    #[arg(long, default_value = "passage")]
    passage_kind: String,
    /// Prefix prepended to every imported id (handy for tagging subjects)
    #[arg(long)]
    id_prefix: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Eval(args) => run_eval(*args),
        Command::Ppa(args) => run_ppa(*args),
        Command::Validate(args) => run_validate(args),
        Command::Import(args) => run_import(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

/// Maps an error chain onto the documented exit codes.
fn classify(error: &anyhow::Error) -> u8 {
    if let Some(run) = error.downcast_ref::<RunError>() {
        return match run {
            RunError::Config(_) => EXIT_CONFIG,
            RunError::Data(_) | RunError::Prompt(_) | RunError::Perturb(_) | RunError::Io(_) => {
                EXIT_DATA
            }
            RunError::Protocol(_) | RunError::Aborted { .. } => EXIT_BACKEND,
        };
    }
    if let Some(ppa) = error.downcast_ref::<PpaError>() {
        return match ppa {
            PpaError::BadCap | PpaError::NoOrderings => EXIT_CONFIG,
            PpaError::BadOptionCount(_) | PpaError::EmptyDataset(_) => EXIT_DATA,
            PpaError::Backend { .. } | PpaError::AllSkipped => EXIT_BACKEND,
        };
    }
    if error.downcast_ref::<DataError>().is_some() {
        return EXIT_DATA;
    }
    EXIT_CONFIG
}

fn load_eval_config(args: &EvalArgs) -> anyhow::Result<EvalConfig> {
    let mut config: EvalConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("parsing config file {}", path.display()))?
        }
        None => EvalConfig::default(),
    };
    if let Some(dataset) = &args.dataset {
        config.dataset = dataset.clone();
    }
    if let Some(pool) = &args.pool {
        config.pool = Some(pool.clone());
    }
    if let Some(protocol) = &args.protocol {
        config.protocol = protocol.parse().map_err(anyhow::Error::msg)?;
    }
    if let Some(strategy) = &args.cp_strategy {
        config.cp_strategy = strategy.parse().map_err(anyhow::Error::msg)?;
    }
    if let Some(shots) = &args.shots {
        config.shots = shots.parse().map_err(anyhow::Error::msg)?;
    }
    if let Some(budget) = args.token_budget {
        config.token_budget = budget;
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(corruption) = &args.corruption {
        config.corruption = corruption.parse().map_err(anyhow::Error::msg)?;
    }
    if let Some(seed) = args.corruption_seed {
        config.corruption_seed = Some(seed);
    }
    if args.strong_shuffle {
        config.strong_shuffle = true;
    }
    if let Some(sample) = args.sample {
        config.sample_count = Some(sample);
    }
    if args.skip_errors {
        config.skip_errors = true;
    }
    if let Some(workers) = args.workers {
        config.workers = workers;
    }
    if let Some(partial) = &args.partial {
        config.partial_path = Some(partial.clone());
    }
    args.backend.apply(&mut config.backend)?;
    if config.dataset.as_os_str().is_empty() {
        return Err(RunError::Config(
            "no dataset given (use --dataset or a config file)".into(),
        )
        .into());
    }
    Ok(config)
}

fn emit_or_write(
    report: &EvalReport,
    format: ReportFormat,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    match out {
        Some(path) => mcqa::write_report(report, format, path)
            .with_context(|| format!("writing report to {}", path.display()))?,
        None => print!("{}", emit_report(report, format)),
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let config = load_eval_config(&args)?;
    if config.ppa {
        return run_ppa_from_config(&config, args.out.as_deref());
    }
    let format: ReportFormat = args.format.parse().map_err(anyhow::Error::msg)?;
    match mcqa::run_evaluation(&config) {
        Ok(report) => {
            emit_or_write(&report, format, args.out.as_deref())?;
            Ok(ExitCode::SUCCESS)
        }
        Err(RunError::Aborted {
            id,
            message,
            partial,
        }) => {
            // Persist whatever completed before failing.
            emit_or_write(&partial, format, args.out.as_deref())?;
            eprintln!("error: aborted at question {id:?}: {message}");
            Ok(ExitCode::from(EXIT_BACKEND))
        }
        Err(e) => Err(e.into()),
    }
}

fn load_cli_dataset(dataset: &Path, pool: Option<&Path>) -> anyhow::Result<Dataset> {
    Ok(match pool {
        Some(pool) => load_dataset_with_pool(dataset, pool)?,
        None => load_dataset(dataset)?,
    })
}

fn run_ppa(args: PpaArgs) -> anyhow::Result<ExitCode> {
    let mut backend_config = BackendConfig::default();
    args.backend.apply(&mut backend_config)?;
    let config = EvalConfig {
        dataset: args.dataset.clone(),
        pool: args.pool.clone(),
        shots: Shots::Fixed(args.shots),
        seed: args.seed,
        ppa: true,
        ppa_cap: args.cap,
        sample_count: args.sample,
        skip_errors: args.skip_errors,
        backend: backend_config,
        ..EvalConfig::default()
    };
    run_ppa_from_config(&config, args.out.as_deref())
}

/// Shared agreement-measurement path for the `ppa` subcommand and for eval
/// configs carrying `ppa = true`.
fn run_ppa_from_config(config: &EvalConfig, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let mut dataset = load_cli_dataset(&config.dataset, config.pool.as_deref())?;
    if let Some(sample) = config.sample_count {
        dataset = sample_instances(&dataset, sample, config.seed);
    }
    let backend = mcqa::build_backend(&config.backend, &dataset)?;
    let shots = match config.shots {
        Shots::Fixed(k) => k,
        Shots::Max => {
            return Err(RunError::Config(
                "agreement runs take a fixed shot count, not \"max\"".into(),
            )
            .into())
        }
    };
    if shots > dataset.exemplar_pool.len() {
        return Err(RunError::Config(format!(
            "shots {} but the exemplar pool holds only {}",
            shots,
            dataset.exemplar_pool.len()
        ))
        .into());
    }
    let exemplars: Vec<(Question, AnswerBinding)> = dataset
        .exemplar_pool
        .iter()
        .take(shots)
        .map(|q| (q.clone(), AnswerBinding::identity(q.num_options())))
        .collect();
    let protocol = McpProtocol::new(&config.backend.model_id)
        .with_symbol_mode(config.backend.symbol_mode)
        .with_exemplars(exemplars);
    let result = ppa_for_dataset(
        &dataset,
        backend.as_ref(),
        &protocol,
        config.ppa_cap,
        config.seed,
        config.skip_errors,
    )?;
    let table = mcqa::ppa::render_ppa_table(&result);
    match out {
        Some(path) => std::fs::write(path, &table)
            .with_context(|| format!("writing agreement table to {}", path.display()))?,
        None => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_validate(args: ValidateArgs) -> anyhow::Result<ExitCode> {
    // Assemble by hand so every violation is listed, not just the first.
    let questions = mcqa::load_questions(&args.dataset)?;
    let pool = match &args.pool {
        Some(path) => mcqa::load_questions(path)?,
        None => Vec::new(),
    };
    let dataset = Dataset {
        name: args
            .dataset
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
        split: mcqa::Split::Test,
        questions,
        exemplar_pool: pool,
    };
    let report = validate_dataset(&dataset);
    println!("{report}");
    if report.is_clean() {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(EXIT_DATA))
    }
}

fn parse_passage_kind(name: &str) -> anyhow::Result<PassageKind> {
    match name {
        "passage" => Ok(PassageKind::Passage),
        "story" => Ok(PassageKind::Story),
        "dialogue" => Ok(PassageKind::Dialogue),
        other => anyhow::bail!("unknown passage kind {other:?} (passage|story|dialogue)"),
    }
}

/// Pulls option texts out of either a plain list or a text/label object.
fn extract_options(value: &serde_json::Value) -> Option<(Vec<String>, Option<Vec<String>>)> {
    if let Some(list) = value.as_array() {
        let texts: Option<Vec<String>> = list
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect();
        return texts.map(|t| (t, None));
    }
    let object = value.as_object()?;
    let texts: Option<Vec<String>> = object
        .get("text")?
        .as_array()?
        .iter()
        .map(|v| v.as_str().map(str::to_string))
        .collect();
    let labels: Option<Vec<String>> = object.get("label").and_then(|l| {
        l.as_array()?
            .iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect()
    });
    texts.map(|t| (t, labels))
}

/// Resolves the gold field against the options: an index, a label from the
/// source's label array, a bare symbol letter, or the exact option text.
fn resolve_gold(
    gold: &serde_json::Value,
    options: &[String],
    labels: Option<&[String]>,
) -> Option<usize> {
    if let Some(index) = gold.as_u64() {
        let index = index as usize;
        return (index < options.len()).then_some(index);
    }
    let text = gold.as_str()?;
    if let Some(labels) = labels {
        if let Some(position) = labels.iter().position(|l| l == text) {
            return Some(position);
        }
    }
    if text.len() == 1 {
        let c = text.chars().next().unwrap().to_ascii_uppercase();
        if c.is_ascii_uppercase() {
            let index = (c as u8 - b'A') as usize;
            if index < options.len() {
                return Some(index);
            }
        }
    }
    options.iter().position(|o| o == text)
}

fn run_import(args: ImportArgs) -> anyhow::Result<ExitCode> {
    let text = std::fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let passage_kind = parse_passage_kind(&args.passage_kind)?;
    let mut questions = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: serde_json::Value = serde_json::from_str(line)
            .with_context(|| format!("{}:{line_no}: invalid JSON", args.input.display()))?;
        let fail = |what: &str| {
            anyhow::anyhow!(
                "{}:{line_no}: {what} (field mapping: id={}, stem={}, options={}, gold={})",
                args.input.display(),
                args.id_field,
                args.stem_field,
                args.options_field,
                args.gold_field
            )
        };
        let id = record
            .get(&args.id_field)
            .and_then(|v| match v {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .unwrap_or_else(|| format!("row{line_no}"));
        let id = match &args.id_prefix {
            Some(prefix) => format!("{prefix}{id}"),
            None => id,
        };
        let stem = record
            .get(&args.stem_field)
            .and_then(|v| v.as_str())
            .ok_or_else(|| fail("missing stem"))?
            .to_string();
        let (options, labels) = record
            .get(&args.options_field)
            .and_then(extract_options)
            .ok_or_else(|| fail("missing or malformed options"))?;
        let gold_index = record
            .get(&args.gold_field)
            .and_then(|g| resolve_gold(g, &options, labels.as_deref()))
            .ok_or_else(|| fail("gold answer does not resolve to an option"))?;
        let passage = args
            .passage_field
            .as_ref()
            .and_then(|f| record.get(f))
            .and_then(|v| v.as_str())
            .map(str::to_string);
        let question = Question {
            id,
            passage_kind: if passage.is_some() {
                passage_kind
            } else {
                PassageKind::None
            },
            passage,
            stem,
            options,
            gold_index,
        };
        if let Err(message) = question.check_invariants() {
            return Err(fail(&format!("invalid question: {message}")));
        }
        questions.push(question);
    }

    // Catch duplicate ids before writing.
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for question in &questions {
        *counts.entry(question.id.as_str()).or_insert(0) += 1;
    }
    let duplicates: Vec<&&str> = counts
        .iter()
        .filter(|(_, count)| **count > 1)
        .map(|(id, _)| id)
        .collect();
    if !duplicates.is_empty() {
        return Err(RunError::Data(DataError::Invariant(format!(
            "duplicate ids after import: {duplicates:?}"
        )))
        .into());
    }

    write_questions(&args.output, &questions)?;
    println!(
        "imported {} questions to {}",
        questions.len(),
        args.output.display()
    );
    Ok(ExitCode::SUCCESS)
}
