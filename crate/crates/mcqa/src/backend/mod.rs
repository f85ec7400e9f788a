//! Uniform model interface: per-token logprobs for a completion given a
//! context, and next-token logprobs for candidate symbols.
//!
//! Implementations: deterministic mock models for offline verification
//! ([`mocks`]), a completions-style HTTP client ([`remote`]), and a
//! [`dispatch::Dispatcher`] that layers content-addressed caching, token
//! bucket rate limiting and retry with exponential backoff over any backend.

pub mod cache;
pub mod dispatch;
pub mod limiter;
pub mod mocks;
pub mod remote;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::{HeuristicCounter, TokenCounter};
use crate::scorer::{ScoreError, TokenLogProbs};

#[derive(Debug, Error)]
pub enum BackendError {
    /// Transient failure (transport, throttling, 5xx); safe to retry.
    #[error("retryable backend failure: {0}")]
    Retryable(String),
    /// The endpoint refused the request (auth, content policy, bad model).
    #[error("backend refused the request: {0}")]
    Terminal(String),
    /// The endpoint answered but the payload does not satisfy the contract.
    #[error("protocol violation: {message}; raw payload: {payload}")]
    Protocol { message: String, payload: String },
    /// Candidates missing from the returned top-k with no floor configured.
    #[error("symbols missing from returned top-k and no floor configured: {}", missing.join(", "))]
    Coverage { missing: Vec<String> },
    #[error("retries exhausted after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        #[source]
        last: Box<BackendError>,
        log: Vec<String>,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("cache I/O: {0}")]
    Cache(#[from] std::io::Error),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Retryable(_))
    }
}

/// What the backend should score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMode {
    /// Per-token logprobs over exactly the completion span.
    CompletionLogProbs { completion: String },
    /// Next-token logprobs for each candidate surface form after the context.
    SymbolDistribution { candidates: Vec<String> },
}

/// One scoring request; the cache key is a digest of the whole value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub model_id: String,
    pub context: String,
    pub mode: RequestMode,
}

impl BackendRequest {
    pub fn completion(model_id: &str, context: &str, completion: &str) -> Self {
        BackendRequest {
            model_id: model_id.to_string(),
            context: context.to_string(),
            mode: RequestMode::CompletionLogProbs {
                completion: completion.to_string(),
            },
        }
    }

    pub fn symbols(model_id: &str, context: &str, candidates: Vec<String>) -> Self {
        BackendRequest {
            model_id: model_id.to_string(),
            context: context.to_string(),
            mode: RequestMode::SymbolDistribution { candidates },
        }
    }
}

/// Next-token logprob per candidate surface form, in request order.
/// `floored` lists candidates that fell below the endpoint's top-k and were
/// assigned the configured floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolLogProbs {
    pub entries: Vec<(String, f64)>,
    #[serde(default)]
    pub floored: Vec<String>,
}

impl SymbolLogProbs {
    pub fn logprob_of(&self, candidate: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(c, _)| c == candidate)
            .map(|(_, lp)| *lp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendResponse {
    Completion(TokenLogProbs),
    Symbols(SymbolLogProbs),
}

/// A scoring backend. Implementations must be shareable across worker
/// threads; mock backends are pure functions of the request.
pub trait ModelBackend: Send + Sync {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError>;

    /// Deterministic token estimate for budget packing. Defaults to the
    /// ceil(chars/4) heuristic; backends with an exact tokenizer override.
    fn count_tokens(&self, text: &str) -> usize {
        HeuristicCounter::default().count(text)
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for &T {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).dispatch(request)
    }
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for Arc<T> {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).dispatch(request)
    }
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
}

impl<T: ModelBackend + ?Sized> ModelBackend for Box<T> {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        (**self).dispatch(request)
    }
    fn count_tokens(&self, text: &str) -> usize {
        (**self).count_tokens(text)
    }
}

/// Scores a completion, enforcing the request contract: non-empty completion
/// in, tokens covering exactly the completion span out.
pub fn completion_logprobs(
    backend: &dyn ModelBackend,
    model_id: &str,
    context: &str,
    completion: &str,
) -> Result<TokenLogProbs, BackendError> {
    if completion.is_empty() {
        return Err(BackendError::InvalidRequest(
            "completion must be non-empty".to_string(),
        ));
    }
    let request = BackendRequest::completion(model_id, context, completion);
    match backend.dispatch(&request)? {
        BackendResponse::Completion(tokens) => {
            let covered = tokens.text();
            if covered != completion {
                return Err(BackendError::Protocol {
                    message: format!(
                        "returned tokens cover {covered:?}, not the completion {completion:?}"
                    ),
                    payload: format!("{tokens:?}"),
                });
            }
            Ok(tokens)
        }
        BackendResponse::Symbols(_) => Err(BackendError::Protocol {
            message: "expected completion logprobs, got a symbol distribution".to_string(),
            payload: String::new(),
        }),
    }
}

/// Fetches next-token logprobs for candidate symbols after `context`.
pub fn next_symbol_distribution(
    backend: &dyn ModelBackend,
    model_id: &str,
    context: &str,
    candidates: &[String],
) -> Result<SymbolLogProbs, BackendError> {
    if context.is_empty() {
        return Err(BackendError::InvalidRequest(
            "context must be non-empty for symbol scoring".to_string(),
        ));
    }
    if candidates.is_empty() {
        return Err(BackendError::InvalidRequest("no candidates".to_string()));
    }
    for (i, candidate) in candidates.iter().enumerate() {
        if candidates[i + 1..].contains(candidate) {
            return Err(BackendError::InvalidRequest(format!(
                "duplicate candidate {candidate:?}"
            )));
        }
    }
    let request = BackendRequest::symbols(model_id, context, candidates.to_vec());
    match backend.dispatch(&request)? {
        BackendResponse::Symbols(symbols) => {
            for candidate in candidates {
                if symbols.logprob_of(candidate).is_none() {
                    return Err(BackendError::Protocol {
                        message: format!("response lacks an entry for candidate {candidate:?}"),
                        payload: format!("{symbols:?}"),
                    });
                }
            }
            Ok(symbols)
        }
        BackendResponse::Completion(_) => Err(BackendError::Protocol {
            message: "expected a symbol distribution, got completion logprobs".to_string(),
            payload: String::new(),
        }),
    }
}

/// Wraps a backend with call counters, for verifying the forward-pass
/// accounting of a run.
pub struct CountingBackend<B> {
    inner: B,
    completion_calls: AtomicU64,
    symbol_calls: AtomicU64,
}

impl<B: ModelBackend> CountingBackend<B> {
    pub fn new(inner: B) -> Self {
        CountingBackend {
            inner,
            completion_calls: AtomicU64::new(0),
            symbol_calls: AtomicU64::new(0),
        }
    }

    pub fn completion_calls(&self) -> u64 {
        self.completion_calls.load(Ordering::SeqCst)
    }

    pub fn symbol_calls(&self) -> u64 {
        self.symbol_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> u64 {
        self.completion_calls() + self.symbol_calls()
    }
}

impl<B: ModelBackend> ModelBackend for CountingBackend<B> {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        match request.mode {
            RequestMode::CompletionLogProbs { .. } => {
                self.completion_calls.fetch_add(1, Ordering::SeqCst)
            }
            RequestMode::SymbolDistribution { .. } => {
                self.symbol_calls.fetch_add(1, Ordering::SeqCst)
            }
        };
        self.inner.dispatch(request)
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.inner.count_tokens(text)
    }
}

/// Adapts a backend's `count_tokens` to the [`TokenCounter`] trait used by
/// exemplar packing.
pub struct BackendCounter<'a>(pub &'a dyn ModelBackend);

impl TokenCounter for BackendCounter<'_> {
    fn count(&self, text: &str) -> usize {
        self.0.count_tokens(text)
    }
}
