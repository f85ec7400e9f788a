//! Client for completions-style HTTP endpoints.
//!
//! The wire contract: POST a JSON body `{model, prompt, max_tokens, echo,
//! logprobs, temperature}`; the endpoint answers with `choices[0].logprobs`
//! carrying parallel arrays `tokens`, `token_logprobs`, `text_offset` (byte
//! offsets into the prompt) and, when `logprobs > 0`, per-position
//! `top_logprobs` maps. Completion scoring echoes the prompt with
//! `max_tokens: 0` and slices the token arrays at the context/completion
//! boundary; symbol scoring samples one token with `logprobs: top_k` and
//! reads the alternatives map at the answer position.
//!
//! Any endpoint conforming to the recorded-fixture contract works; the
//! fixtures live beside the integration tests.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendRequest, BackendResponse, ModelBackend, RequestMode, SymbolLogProbs};
use crate::scorer::TokenLogProbs;

/// The default environment variable holding the API credential.
pub const DEFAULT_API_KEY_ENV: &str = "MCQA_API_KEY";

/// Logprob assigned to candidate symbols absent from the returned top-k.
/// Whenever it is used, the symbol is listed in [`SymbolLogProbs::floored`]
/// so reports can surface it.
pub const DEFAULT_FLOOR_LOGPROB: f64 = -100.0;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    /// How many alternatives to request at the answer position.
    pub top_k: usize,
    /// Floor for candidates below top-k; `None` makes missing candidates a
    /// coverage error.
    pub floor_logprob: Option<f64>,
    /// Environment variable read for the bearer credential.
    pub api_key_env: String,
    pub timeout: Duration,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8080/v1/completions".to_string(),
            top_k: 5,
            floor_logprob: Some(DEFAULT_FLOOR_LOGPROB),
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    echo: bool,
    logprobs: usize,
    temperature: f32,
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Debug, Deserialize)]
struct WireChoice {
    #[allow(dead_code)]
    #[serde(default)]
    text: String,
    logprobs: Option<WireLogProbs>,
}

#[derive(Debug, Deserialize)]
struct WireLogProbs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<BTreeMap<String, f64>>>>,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        RemoteBackend {
            config,
            api_key,
            agent,
        }
    }

    pub fn has_credentials(&self) -> bool {
        self.api_key.is_some()
    }

    fn post(&self, body: &WireRequest) -> Result<(u16, String), BackendError> {
        let mut request = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| BackendError::Retryable(format!("transport failure: {e}")))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Retryable(format!("reading response body: {e}")))?;
        Ok((status, text))
    }

    fn call(&self, body: &WireRequest) -> Result<(WireLogProbs, String), BackendError> {
        let (status, payload) = self.post(body)?;
        match status {
            200..=299 => {}
            408 | 429 | 500..=599 => {
                return Err(BackendError::Retryable(format!(
                    "endpoint returned {status}: {payload}"
                )))
            }
            _ => {
                return Err(BackendError::Terminal(format!(
                    "endpoint returned {status}: {payload}"
                )))
            }
        }
        let parsed: WireResponse =
            serde_json::from_str(&payload).map_err(|e| BackendError::Protocol {
                message: format!("response is not valid completions JSON: {e}"),
                payload: payload.clone(),
            })?;
        let choice = parsed.choices.into_iter().next().ok_or_else(|| {
            BackendError::Protocol {
                message: "response has no choices".to_string(),
                payload: payload.clone(),
            }
        })?;
        let logprobs = choice.logprobs.ok_or_else(|| BackendError::Protocol {
            message: "choice carries no logprobs object".to_string(),
            payload: payload.clone(),
        })?;
        if logprobs.tokens.len() != logprobs.token_logprobs.len()
            || logprobs.tokens.len() != logprobs.text_offset.len()
        {
            return Err(BackendError::Protocol {
                message: "tokens / token_logprobs / text_offset lengths differ".to_string(),
                payload,
            });
        }
        Ok((logprobs, payload))
    }

    /// Echo-scores `context + completion` and slices out the completion span.
    fn completion_logprobs(
        &self,
        model_id: &str,
        context: &str,
        completion: &str,
    ) -> Result<TokenLogProbs, BackendError> {
        let prompt = format!("{context}{completion}");
        let body = WireRequest {
            model: model_id,
            prompt: &prompt,
            max_tokens: 0,
            echo: true,
            logprobs: 0,
            temperature: 0.0,
        };
        let (logprobs, payload) = self.call(&body)?;
        let boundary = context.len();
        let start = logprobs
            .text_offset
            .iter()
            .position(|&offset| offset >= boundary)
            .ok_or_else(|| BackendError::Protocol {
                message: "no token begins at or after the completion boundary".to_string(),
                payload: payload.clone(),
            })?;
        if logprobs.text_offset[start] != boundary {
            return Err(BackendError::Protocol {
                message: format!(
                    "a token straddles the context/completion boundary (offset {} != {boundary})",
                    logprobs.text_offset[start]
                ),
                payload,
            });
        }
        let mut tokens = Vec::with_capacity(logprobs.tokens.len() - start);
        for (token, lp) in logprobs.tokens[start..]
            .iter()
            .zip(&logprobs.token_logprobs[start..])
        {
            let lp = lp.ok_or_else(|| BackendError::Protocol {
                message: format!("null logprob inside the completion span at token {token:?}"),
                payload: payload.clone(),
            })?;
            tokens.push((token.clone(), lp));
        }
        let covered: String = tokens.iter().map(|(t, _)| t.as_str()).collect();
        if covered != completion {
            return Err(BackendError::Protocol {
                message: format!(
                    "completion span tokens spell {covered:?}, expected {completion:?}"
                ),
                payload,
            });
        }
        TokenLogProbs::new(tokens).map_err(|e| BackendError::Protocol {
            message: format!("invalid logprob in completion span: {e}"),
            payload: String::new(),
        })
    }

    /// One-token sample with alternatives; candidate symbols are read from
    /// the top-k map at the answer position.
    fn symbol_distribution(
        &self,
        model_id: &str,
        context: &str,
        candidates: &[String],
    ) -> Result<SymbolLogProbs, BackendError> {
        let body = WireRequest {
            model: model_id,
            prompt: context,
            max_tokens: 1,
            echo: false,
            logprobs: self.config.top_k,
            temperature: 0.0,
        };
        let (logprobs, payload) = self.call(&body)?;
        let mut seen: BTreeMap<String, f64> = BTreeMap::new();
        if let Some(Some(map)) = logprobs.top_logprobs.as_ref().and_then(|v| v.first()) {
            seen.extend(map.iter().map(|(k, v)| (k.clone(), *v)));
        }
        // The sampled token itself may sit outside the alternatives map.
        if let (Some(token), Some(Some(lp))) =
            (logprobs.tokens.first(), logprobs.token_logprobs.first())
        {
            seen.entry(token.clone()).or_insert(*lp);
        }
        if seen.is_empty() {
            return Err(BackendError::Protocol {
                message: "response carries no top_logprobs at the answer position".to_string(),
                payload,
            });
        }
        let mut entries = Vec::with_capacity(candidates.len());
        let mut floored = Vec::new();
        let mut missing = Vec::new();
        for candidate in candidates {
            match (seen.get(candidate), self.config.floor_logprob) {
                (Some(lp), _) => entries.push((candidate.clone(), *lp)),
                (None, Some(floor)) => {
                    entries.push((candidate.clone(), floor));
                    floored.push(candidate.clone());
                }
                (None, None) => missing.push(candidate.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(BackendError::Coverage { missing });
        }
        Ok(SymbolLogProbs { entries, floored })
    }
}

impl ModelBackend for RemoteBackend {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        match &request.mode {
            RequestMode::CompletionLogProbs { completion } => {
                Ok(BackendResponse::Completion(self.completion_logprobs(
                    &request.model_id,
                    &request.context,
                    completion,
                )?))
            }
            RequestMode::SymbolDistribution { candidates } => {
                Ok(BackendResponse::Symbols(self.symbol_distribution(
                    &request.model_id,
                    &request.context,
                    candidates,
                )?))
            }
        }
    }
}
