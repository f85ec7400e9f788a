//! Canonical MCQA dataset records: loading, validation and seeded sampling.
//!
//! The on-disk format is JSON Lines, one flat record per line with keys
//! exactly `{id, stem, options, gold_index, passage?, passage_kind?}`.
//! Adapters for third-party dataset layouts live in the CLI's `import`
//! subcommand, not here; the core schema stays stable across datasets.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

/// Largest supported option count; display symbols are drawn from A-Z.
pub const MAX_OPTIONS: usize = 26;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}{}: {message}", id.as_deref().map(|i| format!(" (record {i})")).unwrap_or_default())]
    Parse {
        path: String,
        line: usize,
        id: Option<String>,
        message: String,
    },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
}

/// What kind of context precedes the question stem, and therefore which
/// prefix the prompt renderer uses (`Passage:`, `Story:` or `Dialogue:`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassageKind {
    None,
    Passage,
    Story,
    Dialogue,
}

impl PassageKind {
    /// The line prefix used when rendering, without the trailing space.
    pub fn prefix(self) -> Option<&'static str> {
        match self {
            PassageKind::None => None,
            PassageKind::Passage => Some("Passage:"),
            PassageKind::Story => Some("Story:"),
            PassageKind::Dialogue => Some("Dialogue:"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Validation => write!(f, "validation"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One multiple-choice question: optional passage, stem, ordered answer
/// options and the index of the gold option.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub passage: Option<String>,
    #[serde(default = "default_passage_kind")]
    pub passage_kind: PassageKind,
    pub stem: String,
    pub options: Vec<String>,
    pub gold_index: usize,
}

fn default_passage_kind() -> PassageKind {
    PassageKind::None
}

impl Question {
    /// Number of answer options.
    pub fn num_options(&self) -> usize {
        self.options.len()
    }

    /// The gold option's text.
    pub fn gold_text(&self) -> &str {
        &self.options[self.gold_index]
    }

    /// Checks every per-question invariant, returning a description of the
    /// first violation found.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("empty id".to_string());
        }
        if self.options.is_empty() {
            return Err("no answer options".to_string());
        }
        if self.options.len() > MAX_OPTIONS {
            return Err(format!(
                "{} answer options exceeds the A-Z symbol alphabet ({MAX_OPTIONS})",
                self.options.len()
            ));
        }
        if let Some(i) = self.options.iter().position(String::is_empty) {
            return Err(format!("option {i} is empty"));
        }
        if self.gold_index >= self.options.len() {
            return Err(format!(
                "gold_index {} out of range for {} options",
                self.gold_index,
                self.options.len()
            ));
        }
        match (&self.passage, self.passage_kind) {
            (None, PassageKind::None) => {}
            (None, kind) => return Err(format!("passage_kind {kind:?} with no passage text")),
            (Some(_), PassageKind::None) => {
                return Err("passage text with passage_kind none".to_string())
            }
            (Some(_), _) => {}
        }
        Ok(())
    }
}

/// A named dataset split: evaluation questions plus a disjoint pool of
/// solved questions to draw few-shot exemplars from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    pub questions: Vec<Question>,
    pub exemplar_pool: Vec<Question>,
}

impl Dataset {
    /// Builds a dataset and checks every invariant, including id uniqueness
    /// and pool/eval disjointness.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        questions: Vec<Question>,
        exemplar_pool: Vec<Question>,
    ) -> Result<Self, DataError> {
        let dataset = Dataset {
            name: name.into(),
            split,
            questions,
            exemplar_pool,
        };
        let report = validate_dataset(&dataset);
        if let Some(finding) = report.findings.first() {
            return Err(DataError::Invariant(finding.to_string()));
        }
        Ok(dataset)
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

/// Parses canonical JSONL question records. Errors name the offending line
/// and, when parseable, the record id.
pub fn load_questions(path: &Path) -> Result<Vec<Question>, DataError> {
    let display = path.display().to_string();
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: display.clone(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut questions = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let question = parse_record(&line).map_err(|(id, message)| DataError::Parse {
            path: display.clone(),
            line: line_no,
            id,
            message,
        })?;
        questions.push(question);
    }
    Ok(questions)
}

/// Serde mirror of the on-disk record; `deny_unknown_fields` keeps the
/// canonical schema closed.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    stem: String,
    options: Vec<String>,
    gold_index: usize,
    #[serde(default)]
    passage: Option<String>,
    #[serde(default)]
    passage_kind: Option<PassageKind>,
}

fn parse_record(line: &str) -> Result<Question, (Option<String>, String)> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| {
        // Best effort at recovering the id for the error message.
        let id = serde_json::from_str::<serde_json::Value>(line)
            .ok()
            .and_then(|v| v.get("id").and_then(|x| x.as_str()).map(String::from));
        (id, e.to_string())
    })?;
    let passage_kind = match (&raw.passage, raw.passage_kind) {
        (Some(_), Some(kind)) => kind,
        (Some(_), None) => PassageKind::Passage,
        (None, Some(kind)) => kind,
        (None, None) => PassageKind::None,
    };
    let question = Question {
        id: raw.id.clone(),
        passage: raw.passage,
        passage_kind,
        stem: raw.stem,
        options: raw.options,
        gold_index: raw.gold_index,
    };
    question
        .check_invariants()
        .map_err(|message| (Some(raw.id), message))?;
    Ok(question)
}

/// Writes questions in the canonical JSONL format, one record per line.
pub fn write_questions(path: &Path, questions: &[Question]) -> Result<(), DataError> {
    let display = path.display().to_string();
    let io_err = |source| DataError::Io {
        path: display.clone(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    for question in questions {
        let line = serde_json::to_string(question).expect("question serializes");
        writeln!(file, "{line}").map_err(|source| DataError::Io {
            path: display.clone(),
            source,
        })?;
    }
    Ok(())
}

fn name_and_split_from_path(path: &Path) -> (String, Split) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let lower = stem.to_lowercase();
    let split = if lower.ends_with("train") {
        Split::Train
    } else if lower.ends_with("validation") || lower.ends_with("valid") || lower.ends_with("dev") {
        Split::Validation
    } else {
        Split::Test
    };
    (stem, split)
}

/// Loads a dataset from a canonical JSONL file. The dataset name is the file
/// stem; the split is inferred from a `train`/`dev`/`validation` suffix and
/// defaults to `test`. The exemplar pool is empty.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let (name, split) = name_and_split_from_path(path);
    let questions = load_questions(path)?;
    Dataset::new(name, split, questions, Vec::new())
}

/// Loads a dataset plus a separate exemplar pool file; ids must be disjoint.
pub fn load_dataset_with_pool(path: &Path, pool_path: &Path) -> Result<Dataset, DataError> {
    let (name, split) = name_and_split_from_path(path);
    let questions = load_questions(path)?;
    let pool = load_questions(pool_path)?;
    Dataset::new(name, split, questions, pool)
}

/// Downsamples to `count` questions, uniformly without replacement and
/// deterministic in `seed`. Selected questions keep their original relative
/// order; the exemplar pool passes through unchanged. A `count` at or above
/// the dataset size returns every question.
pub fn sample_instances(dataset: &Dataset, count: usize, seed: u64) -> Dataset {
    if count >= dataset.questions.len() {
        return dataset.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "downsample", &dataset.name));
    let mut indices: Vec<usize> = (0..dataset.questions.len()).collect();
    indices.shuffle(&mut rng);
    indices.truncate(count);
    indices.sort_unstable();
    Dataset {
        name: dataset.name.clone(),
        split: dataset.split,
        questions: indices
            .into_iter()
            .map(|i| dataset.questions[i].clone())
            .collect(),
        exemplar_pool: dataset.exemplar_pool.clone(),
    }
}

/// One problem found by [`validate_dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Finding {
    DuplicateId { id: String, occurrences: usize },
    PoolOverlap { id: String },
    BadQuestion { id: String, message: String },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::DuplicateId { id, occurrences } => {
                write!(f, "id {id:?} appears {occurrences} times")
            }
            Finding::PoolOverlap { id } => {
                write!(f, "id {id:?} appears in both questions and exemplar pool")
            }
            Finding::BadQuestion { id, message } => write!(f, "question {id:?}: {message}"),
        }
    }
}

/// Validation result: every invariant violation, plus an option-count
/// histogram for quick dataset inspection. Empty iff all invariants hold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    /// option count -> number of questions with that many options
    pub option_count_histogram: BTreeMap<usize, usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            writeln!(f, "ok: no invariant violations")?;
        }
        for finding in &self.findings {
            writeln!(f, "violation: {finding}")?;
        }
        write!(f, "option counts:")?;
        for (n, count) in &self.option_count_histogram {
            write!(f, " {n}x{count}")?;
        }
        Ok(())
    }
}

/// Checks every dataset invariant without throwing: duplicate ids, pool
/// overlap and per-question problems are all reported together.
pub fn validate_dataset(dataset: &Dataset) -> ValidationReport {
    let mut findings = Vec::new();
    let mut histogram = BTreeMap::new();

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for question in dataset.questions.iter().chain(&dataset.exemplar_pool) {
        *counts.entry(question.id.as_str()).or_insert(0) += 1;
    }
    let question_ids: HashSet<&str> = dataset.questions.iter().map(|q| q.id.as_str()).collect();
    for (id, occurrences) in &counts {
        let in_pool = dataset.exemplar_pool.iter().any(|q| q.id.as_str() == *id);
        if in_pool && question_ids.contains(id) {
            findings.push(Finding::PoolOverlap { id: id.to_string() });
        } else if *occurrences > 1 {
            findings.push(Finding::DuplicateId {
                id: id.to_string(),
                occurrences: *occurrences,
            });
        }
    }

    for question in dataset.questions.iter().chain(&dataset.exemplar_pool) {
        *histogram.entry(question.options.len()).or_insert(0) += 1;
        if let Err(message) = question.check_invariants() {
            findings.push(Finding::BadQuestion {
                id: question.id.clone(),
                message,
            });
        }
    }

    ValidationReport {
        findings,
        option_count_histogram: histogram,
    }
}
