//! End-to-end evaluation runs: strategy x shots x perturbation, with exact
//! call accounting.
//!
//! Per-question sub-seeds derive from `(run seed, purpose, question id)`, so
//! adding or removing questions never perturbs another question's shuffle,
//! corruption or exemplar order. Questions are evaluated by a worker pool;
//! records are keyed by question id and emitted sorted, so reports are
//! byte-identical regardless of completion order.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::cache::ResponseCache;
use crate::backend::dispatch::{DispatchConfig, Dispatcher};
use crate::backend::mocks::{MockModel, MockModelSpec};
use crate::backend::remote::{RemoteBackend, RemoteConfig, DEFAULT_API_KEY_ENV};
use crate::backend::{BackendCounter, ModelBackend};
use crate::dataset::{
    load_dataset, load_dataset_with_pool, sample_instances, DataError, Dataset, Question,
};
use crate::perturb::{strong_shuffle, CorruptionKind, CorruptionSpec, PerturbError};
use crate::prompt::{pack_exemplars, AnswerBinding, PromptError};
use crate::protocol::{CpProtocol, McpProtocol, ProtocolError, SymbolMode};
use crate::scorer::{select_answer, Strategy};
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("aborted at question {id:?}: {message}")]
    Aborted {
        id: String,
        message: String,
        /// Everything that completed before the abort, flagged partial.
        partial: Box<EvalReport>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Mcp,
    Cp,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::Mcp => "MCP",
            Protocol::Cp => "CP",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mcp" => Ok(Protocol::Mcp),
            "cp" => Ok(Protocol::Cp),
            other => Err(format!("unknown protocol {other:?} (mcp|cp)")),
        }
    }
}

/// Cloze scoring strategy for a run. `BestOfAll` scores raw, LN and UN from
/// one response set and reports the best, mirroring the strongest-baseline
/// comparison column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpStrategy {
    Raw,
    Ln,
    Un,
    #[default]
    BestOfAll,
}

impl std::str::FromStr for CpStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(CpStrategy::Raw),
            "ln" => Ok(CpStrategy::Ln),
            "un" => Ok(CpStrategy::Un),
            "best" | "best_of_all" => Ok(CpStrategy::BestOfAll),
            other => Err(format!("unknown strategy {other:?} (raw|ln|un|best_of_all)")),
        }
    }
}

/// Exemplar count: a fixed K, or as many as the token budget allows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ShotsRepr", into = "ShotsRepr")]
pub enum Shots {
    Fixed(usize),
    Max,
}

impl Default for Shots {
    fn default() -> Self {
        Shots::Fixed(0)
    }
}

impl std::fmt::Display for Shots {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shots::Fixed(k) => write!(f, "{k}"),
            Shots::Max => write!(f, "max"),
        }
    }
}

impl std::str::FromStr for Shots {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "max" {
            return Ok(Shots::Max);
        }
        s.parse::<usize>()
            .map(Shots::Fixed)
            .map_err(|_| format!("shots must be a non-negative integer or \"max\", got {s:?}"))
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum ShotsRepr {
    Count(usize),
    Label(String),
}

impl TryFrom<ShotsRepr> for Shots {
    type Error = String;
    fn try_from(repr: ShotsRepr) -> Result<Self, Self::Error> {
        match repr {
            ShotsRepr::Count(k) => Ok(Shots::Fixed(k)),
            ShotsRepr::Label(s) => s.parse(),
        }
    }
}

impl From<Shots> for ShotsRepr {
    fn from(shots: Shots) -> Self {
        match shots {
            Shots::Fixed(k) => ShotsRepr::Count(k),
            Shots::Max => ShotsRepr::Label("max".to_string()),
        }
    }
}

/// Backend selection and tuning, echoed verbatim into reports. Credentials
/// never appear here; only the name of the environment variable does.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// `mock:uniform`, `mock:first-symbol`, `mock:oracle`,
    /// `mock:seeded-hash`, `mock:length`, or `remote`.
    pub kind: String,
    pub model_id: String,
    /// Completions endpoint URL (remote only).
    pub endpoint: Option<String>,
    pub api_key_env: String,
    pub requests_per_minute: f64,
    pub max_in_flight: usize,
    pub top_k: usize,
    pub floor_logprob: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    pub symbol_mode: SymbolMode,
    /// Vocabulary size for the uniform mock.
    pub vocab_size: usize,
    /// Seed for the seeded-hash mock.
    pub mock_seed: u64,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: "mock:uniform".to_string(),
            model_id: "mock".to_string(),
            endpoint: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            requests_per_minute: 20.0,
            max_in_flight: 4,
            top_k: 5,
            floor_logprob: Some(-100.0),
            cache_dir: None,
            symbol_mode: SymbolMode::LeadingSpace,
            vocab_size: 4,
            mock_seed: 0,
            timeout_secs: 60,
        }
    }
}

/// Full run specification. Serializable as a flat key-value config file;
/// command-line flags override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub dataset: PathBuf,
    pub pool: Option<PathBuf>,
    pub protocol: Protocol,
    pub cp_strategy: CpStrategy,
    pub shots: Shots,
    pub token_budget: usize,
    pub seed: u64,
    pub corruption: CorruptionKind,
    /// Seed for corruptions; defaults to the run seed.
    pub corruption_seed: Option<u64>,
    pub strong_shuffle: bool,
    /// Run the ordering-agreement measurement instead of accuracy.
    pub ppa: bool,
    /// Permutation cap for PPA; 720 fully enumerates up to six options.
    pub ppa_cap: usize,
    pub sample_count: Option<usize>,
    /// Record per-question failures instead of aborting.
    pub skip_errors: bool,
    pub workers: usize,
    /// Append completed records here as JSON lines while the run progresses.
    pub partial_path: Option<PathBuf>,
    pub backend: BackendConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            dataset: PathBuf::new(),
            pool: None,
            protocol: Protocol::Mcp,
            cp_strategy: CpStrategy::default(),
            shots: Shots::default(),
            token_budget: 4000,
            seed: 0,
            corruption: CorruptionKind::None,
            corruption_seed: None,
            strong_shuffle: false,
            ppa: false,
            ppa_cap: 720,
            sample_count: None,
            skip_errors: false,
            workers: 4,
            partial_path: None,
            backend: BackendConfig::default(),
        }
    }
}

/// One evaluated question. Strategy-keyed maps hold one entry for plain runs
/// and raw/ln/un entries for a best-of-all sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    /// Grouping tag parsed from a `tag/rest` id, for per-subject breakdowns.
    pub tag: Option<String>,
    pub n_options: usize,
    pub exemplar_count: usize,
    /// Gold index after any shuffle/corruption, i.e. in the option order
    /// that was actually presented.
    pub gold_index: usize,
    pub chosen: BTreeMap<String, usize>,
    pub correct: BTreeMap<String, bool>,
    pub scores: BTreeMap<String, Vec<f64>>,
    pub calls: u64,
    pub floored: u64,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagMetrics {
    pub answered: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub answered: usize,
    pub skipped: usize,
    /// Accuracy of the best strategy (equals the single strategy's accuracy
    /// on plain runs).
    pub accuracy: f64,
    pub best_strategy: Option<String>,
    pub per_strategy_accuracy: BTreeMap<String, f64>,
    /// Per-tag breakdown under the best strategy.
    pub per_tag: BTreeMap<String, TagMetrics>,
    pub call_count: u64,
    pub floored_symbols: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub dataset_name: String,
    /// Modal option count, the N column of comparison tables.
    pub option_count: usize,
    /// Modal exemplar count actually used, the K column.
    pub exemplar_count: usize,
    pub records: Vec<EvalRecord>,
    pub metrics: Metrics,
    pub partial: bool,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.metrics.accuracy
    }
}

/// Aggregates records into accuracies, per-strategy and per-tag breakdowns
/// and call totals.
pub fn compute_metrics(records: &[EvalRecord]) -> Metrics {
    let answered: Vec<&EvalRecord> = records.iter().filter(|r| r.skipped.is_none()).collect();
    let skipped = records.len() - answered.len();
    let call_count = records.iter().map(|r| r.calls).sum();
    let floored_symbols = records.iter().map(|r| r.floored).sum();

    let mut per_strategy_accuracy = BTreeMap::new();
    let mut strategies: Vec<&String> = answered
        .iter()
        .flat_map(|r| r.correct.keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    strategies.dedup();
    for strategy in &strategies {
        let correct = answered
            .iter()
            .filter(|r| r.correct.get(*strategy).copied().unwrap_or(false))
            .count();
        let accuracy = if answered.is_empty() {
            0.0
        } else {
            correct as f64 / answered.len() as f64
        };
        per_strategy_accuracy.insert((*strategy).clone(), accuracy);
    }

    let best_strategy = per_strategy_accuracy
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(name, _)| name.clone());
    let accuracy = best_strategy
        .as_ref()
        .and_then(|s| per_strategy_accuracy.get(s))
        .copied()
        .unwrap_or(0.0);

    let mut per_tag: BTreeMap<String, TagMetrics> = BTreeMap::new();
    if let Some(best) = &best_strategy {
        for record in &answered {
            let Some(tag) = &record.tag else { continue };
            let entry = per_tag.entry(tag.clone()).or_insert(TagMetrics {
                answered: 0,
                correct: 0,
                accuracy: 0.0,
            });
            entry.answered += 1;
            if record.correct.get(best).copied().unwrap_or(false) {
                entry.correct += 1;
            }
        }
        for entry in per_tag.values_mut() {
            entry.accuracy = entry.correct as f64 / entry.answered as f64;
        }
    }

    Metrics {
        answered: answered.len(),
        skipped,
        accuracy,
        best_strategy,
        per_strategy_accuracy,
        per_tag,
        call_count,
        floored_symbols,
    }
}

fn tag_of(id: &str) -> Option<String> {
    id.split_once('/').map(|(tag, _)| tag.to_string())
}

/// Smallest value among the most frequent; 0 for an empty iterator.
fn modal(values: impl Iterator<Item = usize>) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for value in values {
        *counts.entry(value).or_insert(0) += 1;
    }
    counts
        .into_iter()
        .max_by_key(|(value, count)| (*count, std::cmp::Reverse(*value)))
        .map(|(value, _)| value)
        .unwrap_or(0)
}

/// Builds the backend named by the config. Remote backends always run under
/// the dispatcher (rate limit, retry, optional cache); mocks are wrapped
/// only when a cache directory is configured.
pub fn build_backend(
    config: &BackendConfig,
    dataset: &Dataset,
) -> Result<Arc<dyn ModelBackend>, RunError> {
    let cache = match &config.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(RunError::Io)?),
        None => None,
    };
    let dispatch = DispatchConfig {
        requests_per_minute: config.requests_per_minute,
        max_in_flight: config.max_in_flight,
        ..DispatchConfig::default()
    };
    if config.kind == "remote" {
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| RunError::Config("remote backend needs an endpoint URL".into()))?;
        let remote = RemoteBackend::new(RemoteConfig {
            endpoint,
            top_k: config.top_k,
            floor_logprob: config.floor_logprob,
            api_key_env: config.api_key_env.clone(),
            timeout: std::time::Duration::from_secs(config.timeout_secs),
        });
        return Ok(Arc::new(Dispatcher::new(remote, dispatch, cache)));
    }
    let spec = match config.kind.as_str() {
        "mock:uniform" => MockModelSpec::Uniform {
            vocab_size: config.vocab_size,
        },
        "mock:first-symbol" => MockModelSpec::FirstSymbolBiased,
        "mock:oracle" => return finish_mock(MockModel::oracle_for(dataset), cache, dispatch),
        "mock:seeded-hash" => MockModelSpec::SeededHash {
            seed: config.mock_seed,
        },
        "mock:length" => MockModelSpec::LengthBiased,
        other => {
            return Err(RunError::Config(format!(
                "unknown backend kind {other:?} (mock:uniform|mock:first-symbol|mock:oracle|mock:seeded-hash|mock:length|remote)"
            )))
        }
    };
    finish_mock(MockModel::new(spec), cache, dispatch)
}

fn finish_mock(
    mock: MockModel,
    cache: Option<ResponseCache>,
    dispatch: DispatchConfig,
) -> Result<Arc<dyn ModelBackend>, RunError> {
    Ok(match cache {
        Some(cache) => Arc::new(Dispatcher::new(mock, dispatch, Some(cache))),
        None => Arc::new(mock),
    })
}

/// Which strategies a run records, and whether the unconditional pass is
/// needed.
fn active_strategies(config: &EvalConfig) -> (Vec<Strategy>, bool) {
    match config.protocol {
        Protocol::Mcp => (vec![Strategy::Mcp], false),
        Protocol::Cp => match config.cp_strategy {
            CpStrategy::Raw => (vec![Strategy::Raw], false),
            CpStrategy::Ln => (vec![Strategy::Ln], false),
            CpStrategy::Un => (vec![Strategy::Un], true),
            CpStrategy::BestOfAll => (vec![Strategy::Raw, Strategy::Ln, Strategy::Un], true),
        },
    }
}

/// Shuffle, corrupt, pick exemplars, render, score and select for one
/// question.
fn evaluate_question(
    original: &Question,
    pool: &[Question],
    config: &EvalConfig,
    backend: &dyn ModelBackend,
) -> Result<EvalRecord, RunError> {
    let mut question = original.clone();
    if config.strong_shuffle {
        question = strong_shuffle(
            &question,
            derive_seed(config.seed, "strong_shuffle", &question.id),
        )?;
    }
    let corruption = CorruptionSpec {
        kind: config.corruption,
        seed: config.corruption_seed.unwrap_or(config.seed),
    };
    question = corruption.apply(&question);

    let mut ordered_pool: Vec<Question> = pool.to_vec();
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "exemplars", &question.id));
    ordered_pool.shuffle(&mut rng);
    let exemplars: Vec<Question> = match config.shots {
        Shots::Fixed(k) => ordered_pool.into_iter().take(k).collect(),
        Shots::Max => pack_exemplars(
            &ordered_pool,
            &question,
            config.token_budget,
            &BackendCounter(backend),
        )?,
    };

    let (strategies, with_unconditional) = active_strategies(config);
    let mut record = EvalRecord {
        id: question.id.clone(),
        tag: tag_of(&question.id),
        n_options: question.num_options(),
        exemplar_count: exemplars.len(),
        gold_index: question.gold_index,
        chosen: BTreeMap::new(),
        correct: BTreeMap::new(),
        scores: BTreeMap::new(),
        calls: 0,
        floored: 0,
        skipped: None,
    };

    match config.protocol {
        Protocol::Mcp => {
            let bound: Vec<(Question, AnswerBinding)> = exemplars
                .into_iter()
                .map(|q| {
                    let binding = AnswerBinding::identity(q.num_options());
                    (q, binding)
                })
                .collect();
            let protocol = McpProtocol::new(&config.backend.model_id)
                .with_symbol_mode(config.backend.symbol_mode)
                .with_exemplars(bound);
            let binding = AnswerBinding::identity(question.num_options());
            let outcome = protocol.choose(backend, &question, &binding)?;
            record.calls = outcome.calls;
            record.floored = outcome.floored;
            record.chosen.insert("mcp".into(), outcome.chosen);
            record
                .correct
                .insert("mcp".into(), outcome.chosen == question.gold_index);
            record.scores.insert("mcp".into(), outcome.scores);
        }
        Protocol::Cp => {
            let protocol =
                CpProtocol::new(&config.backend.model_id).with_exemplars(exemplars);
            let (cloze_scores, calls) =
                protocol.score_options(backend, &question, with_unconditional)?;
            record.calls = calls;
            for strategy in strategies {
                let values: Vec<f64> = cloze_scores
                    .iter()
                    .map(|s| {
                        s.for_strategy(strategy)
                            .expect("strategy was scored on this run")
                    })
                    .collect();
                let chosen = select_answer(&values);
                record.chosen.insert(strategy.name().into(), chosen);
                record
                    .correct
                    .insert(strategy.name().into(), chosen == question.gold_index);
                record.scores.insert(strategy.name().into(), values);
            }
        }
    }
    Ok(record)
}

/// Loads the dataset named by the config, builds its backend and evaluates.
pub fn run_evaluation(config: &EvalConfig) -> Result<EvalReport, RunError> {
    let dataset = match &config.pool {
        Some(pool) => load_dataset_with_pool(&config.dataset, pool)?,
        None => load_dataset(&config.dataset)?,
    };
    let backend = build_backend(&config.backend, &dataset)?;
    evaluate_dataset(&dataset, config, backend.as_ref())
}

/// Evaluates an in-memory dataset against an injected backend. Deterministic:
/// identical (dataset, config, backend behavior) yields an identical report,
/// whatever the worker interleaving or cache temperature.
pub fn evaluate_dataset(
    dataset: &Dataset,
    config: &EvalConfig,
    backend: &dyn ModelBackend,
) -> Result<EvalReport, RunError> {
    let eval_set = match config.sample_count {
        Some(count) => sample_instances(dataset, count, config.seed),
        None => dataset.clone(),
    };

    let partial_sink: Option<Mutex<std::fs::File>> = match &config.partial_path {
        Some(path) => Some(Mutex::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(RunError::Io)?,
        )),
        None => None,
    };

    let thread_pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| RunError::Config(format!("worker pool: {e}")))?;

    let outcomes: Vec<(String, Result<EvalRecord, RunError>)> = thread_pool.install(|| {
        eval_set
            .questions
            .par_iter()
            .map(|question| {
                let outcome =
                    evaluate_question(question, &eval_set.exemplar_pool, config, backend);
                if let (Ok(record), Some(sink)) = (&outcome, &partial_sink) {
                    // Recovery data only; order reflects completion, not input.
                    if let Ok(mut file) = sink.lock() {
                        let _ = writeln!(
                            file,
                            "{}",
                            serde_json::to_string(record).expect("record serializes")
                        );
                    }
                }
                (question.id.clone(), outcome)
            })
            .collect()
    });

    let mut records = Vec::with_capacity(outcomes.len());
    let mut abort: Option<(String, String)> = None;
    for (id, outcome) in outcomes {
        match outcome {
            Ok(record) => records.push(record),
            Err(e) if config.skip_errors => {
                let original = eval_set
                    .questions
                    .iter()
                    .find(|q| q.id == id)
                    .expect("outcome id came from the eval set");
                records.push(EvalRecord {
                    id: id.clone(),
                    tag: tag_of(&id),
                    n_options: original.num_options(),
                    exemplar_count: 0,
                    gold_index: original.gold_index,
                    chosen: BTreeMap::new(),
                    correct: BTreeMap::new(),
                    scores: BTreeMap::new(),
                    calls: 0,
                    floored: 0,
                    skipped: Some(e.to_string()),
                });
            }
            Err(e) => {
                abort = Some((id, e.to_string()));
                break;
            }
        }
    }

    records.sort_by(|a, b| a.id.cmp(&b.id));
    let metrics = compute_metrics(&records);
    let answered = records.iter().filter(|r| r.skipped.is_none());
    let report = EvalReport {
        config: config.clone(),
        dataset_name: eval_set.name.clone(),
        option_count: modal(answered.clone().map(|r| r.n_options)),
        exemplar_count: modal(answered.map(|r| r.exemplar_count)),
        records,
        metrics,
        partial: abort.is_some(),
    };

    match abort {
        Some((id, message)) => Err(RunError::Aborted {
            id,
            message,
            partial: Box::new(report),
        }),
        None => Ok(report),
    }
}
