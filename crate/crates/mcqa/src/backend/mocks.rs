//! Deterministic mock models.
//!
//! Every mock is a pure function of `(spec, request)`: identical requests
//! yield identical responses across processes, which makes end-to-end runs
//! reproducible and lets tests assert exact values. Completions are split
//! into mock tokens of one word plus its leading whitespace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, ModelBackend, RequestMode, SymbolLogProbs};
use crate::dataset::Dataset;
use crate::scorer::TokenLogProbs;
use crate::seed::derive_seed;

/// Splits text into mock tokens: each token is a run of whitespace followed
/// by a run of non-whitespace (a trailing whitespace run stands alone).
pub fn mock_tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut in_word = false;
    for c in text.chars() {
        if c.is_whitespace() {
            if in_word {
                tokens.push(std::mem::take(&mut current));
                in_word = false;
            }
            current.push(c);
        } else {
            in_word = true;
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Test-double behaviors for the evaluation procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockModelSpec {
    /// Every token and every candidate gets logprob ln(1/vocab_size).
    Uniform { vocab_size: usize },
    /// Always top-scores the first listed symbol ("A").
    FirstSymbolBiased,
    /// Selects by option text alone: parses the prompt, looks up the gold
    /// answer for the stem and top-scores whichever symbol carries it.
    /// Matching ignores case and whitespace so the oracle stays
    /// order-invariant under corruptions too.
    OrderInvariantOracle { gold_by_stem: BTreeMap<String, String> },
    /// Pseudo-random logprobs from a hash of (seed, request): a uniform
    /// random chooser that is still a pure function.
    SeededHash { seed: u64 },
    /// Total completion logprob strictly decreasing in token count.
    LengthBiased,
}

/// In-process backend driven by a [`MockModelSpec`].
#[derive(Debug, Clone)]
pub struct MockModel {
    spec: MockModelSpec,
}

impl MockModel {
    pub fn new(spec: MockModelSpec) -> Self {
        MockModel { spec }
    }

    /// Order-invariant oracle keyed by the stems of every question in the
    /// dataset (evaluation split and exemplar pool).
    pub fn oracle_for(dataset: &Dataset) -> Self {
        let gold_by_stem = dataset
            .questions
            .iter()
            .chain(&dataset.exemplar_pool)
            .map(|q| (q.stem.clone(), q.gold_text().to_string()))
            .collect();
        MockModel::new(MockModelSpec::OrderInvariantOracle { gold_by_stem })
    }

    pub fn spec(&self) -> &MockModelSpec {
        &self.spec
    }
}

fn normalize(text: &str) -> String {
    text.chars()
        .filter(|c| !c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// The stem of the last `Question: ` line in the prompt, if any.
fn last_stem(context: &str) -> Option<&str> {
    context.lines().rev().find_map(|line| line.strip_prefix("Question: "))
}

/// Option texts by symbol label from the final block of an MCP prompt:
/// lines of the form `X. <text>` between the last stem line and `Answer:`.
fn last_block_options(context: &str) -> BTreeMap<char, String> {
    let mut options = BTreeMap::new();
    for line in context.lines().rev() {
        if line.starts_with("Question: ") {
            break;
        }
        let mut chars = line.chars();
        if let (Some(symbol), Some('.'), Some(' ')) = (chars.next(), chars.next(), chars.next()) {
            if symbol.is_ascii_uppercase() {
                options.insert(symbol, chars.collect());
            }
        }
    }
    options
}

/// Logprob in [-4.0, -0.01] derived from a hash; uniform enough for a
/// random-chooser test double.
fn hashed_logprob(seed: u64, parts: &[&str]) -> f64 {
    let key = parts.join("\u{1f}");
    let h = derive_seed(seed, "mock_logprob", &key);
    let fraction = h as f64 / u64::MAX as f64;
    -0.01 - 3.99 * fraction
}

impl MockModel {
    fn completion_response(&self, context: &str, completion: &str) -> TokenLogProbs {
        let tokens = mock_tokenize(completion);
        let logprobs: Vec<(String, f64)> = match &self.spec {
            MockModelSpec::Uniform { vocab_size } => {
                let lp = -(*vocab_size.max(&1) as f64).ln();
                tokens.into_iter().map(|t| (t, lp)).collect()
            }
            MockModelSpec::FirstSymbolBiased | MockModelSpec::LengthBiased => {
                tokens.into_iter().map(|t| (t, -1.0)).collect()
            }
            MockModelSpec::OrderInvariantOracle { gold_by_stem } => {
                let gold = last_stem(context).and_then(|stem| gold_by_stem.get(stem));
                let lp = match gold {
                    Some(gold) if normalize(gold) == normalize(completion) => -0.01,
                    _ => -2.0,
                };
                tokens.into_iter().map(|t| (t, lp)).collect()
            }
            MockModelSpec::SeededHash { seed } => tokens
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let lp = hashed_logprob(*seed, &[context, completion, &i.to_string(), &t]);
                    (t, lp)
                })
                .collect(),
        };
        TokenLogProbs::new(logprobs).expect("mock logprobs are finite and non-positive")
    }

    fn symbol_response(&self, context: &str, candidates: &[String]) -> SymbolLogProbs {
        let entries: Vec<(String, f64)> = match &self.spec {
            MockModelSpec::Uniform { vocab_size } => {
                let lp = -(*vocab_size.max(&1) as f64).ln();
                candidates.iter().map(|c| (c.clone(), lp)).collect()
            }
            MockModelSpec::FirstSymbolBiased => candidates
                .iter()
                .enumerate()
                .map(|(i, c)| (c.clone(), -0.1 - i as f64))
                .collect(),
            MockModelSpec::OrderInvariantOracle { gold_by_stem } => {
                let gold = last_stem(context).and_then(|stem| gold_by_stem.get(stem));
                let options = last_block_options(context);
                candidates
                    .iter()
                    .enumerate()
                    .map(|(i, candidate)| {
                        let label = candidate.trim().chars().next().unwrap_or('?');
                        let is_gold = match (gold, options.get(&label)) {
                            (Some(gold), Some(text)) => normalize(text) == normalize(gold),
                            _ => false,
                        };
                        let lp = if is_gold { -0.05 } else { -5.0 - i as f64 };
                        (candidate.clone(), lp)
                    })
                    .collect()
            }
            MockModelSpec::SeededHash { seed } => candidates
                .iter()
                .map(|c| (c.clone(), hashed_logprob(*seed, &[context, c])))
                .collect(),
            MockModelSpec::LengthBiased => {
                candidates.iter().map(|c| (c.clone(), -1.0)).collect()
            }
        };
        SymbolLogProbs {
            entries,
            floored: Vec::new(),
        }
    }
}

impl ModelBackend for MockModel {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        match &request.mode {
            RequestMode::CompletionLogProbs { completion } => Ok(BackendResponse::Completion(
                self.completion_response(&request.context, completion),
            )),
            RequestMode::SymbolDistribution { candidates } => Ok(BackendResponse::Symbols(
                self.symbol_response(&request.context, candidates),
            )),
        }
    }
}
