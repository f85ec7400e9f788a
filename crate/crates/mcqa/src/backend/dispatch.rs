//! Dispatch pipeline: cache lookup, in-flight gating, rate limiting, retry
//! with exponential backoff, then store.
//!
//! A cache hit returns without touching the limiter or the wrapped backend,
//! so warm re-runs of an evaluation make zero remote calls. The token bucket
//! and in-flight gate are shared across all worker threads using the
//! dispatcher.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use super::cache::ResponseCache;
use super::limiter::{Semaphore, TokenBucket};
use super::{BackendError, BackendRequest, BackendResponse, ModelBackend};

/// Exponential backoff schedule for retryable errors.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: f64,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_secs(1),
            factor: 2.0,
            max_attempts: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DispatchConfig {
    pub requests_per_minute: f64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for DispatchConfig {
    fn default() -> Self {
        DispatchConfig {
            requests_per_minute: 20.0,
            max_in_flight: 4,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct Dispatcher<B> {
    inner: B,
    cache: Option<ResponseCache>,
    bucket: TokenBucket,
    gate: Semaphore,
    retry: RetryPolicy,
    remote_dispatches: AtomicU64,
}

impl<B: ModelBackend> Dispatcher<B> {
    pub fn new(inner: B, config: DispatchConfig, cache: Option<ResponseCache>) -> Self {
        Dispatcher {
            inner,
            cache,
            bucket: TokenBucket::per_minute(config.requests_per_minute),
            gate: Semaphore::new(config.max_in_flight),
            retry: config.retry,
            remote_dispatches: AtomicU64::new(0),
        }
    }

    /// Number of calls that reached the wrapped backend (cache misses times
    /// attempts).
    pub fn remote_dispatches(&self) -> u64 {
        self.remote_dispatches.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn call_with_retry(
        &self,
        request: &BackendRequest,
    ) -> Result<BackendResponse, BackendError> {
        let mut attempt_log = Vec::new();
        let mut delay = self.retry.base;
        for attempt in 1..=self.retry.max_attempts {
            self.bucket.acquire();
            self.remote_dispatches.fetch_add(1, Ordering::SeqCst);
            match self.inner.dispatch(request) {
                Ok(response) => return Ok(response),
                Err(e) if e.is_retryable() => {
                    attempt_log.push(format!("attempt {attempt}: {e}"));
                    if attempt == self.retry.max_attempts {
                        return Err(BackendError::RetriesExhausted {
                            attempts: self.retry.max_attempts,
                            last: Box::new(e),
                            log: attempt_log,
                        });
                    }
                    log::warn!("retryable backend error, backing off {delay:?}: {e}");
                    std::thread::sleep(delay);
                    delay = delay.mul_f64(self.retry.factor);
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("retry loop returns on the last attempt")
    }
}

impl<B: ModelBackend> ModelBackend for Dispatcher<B> {
    fn dispatch(&self, request: &BackendRequest) -> Result<BackendResponse, BackendError> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(request)? {
                return Ok(hit);
            }
        }
        let _permit = self.gate.acquire();
        let response = self.call_with_retry(request)?;
        if let Some(cache) = &self.cache {
            cache.put(request, &response)?;
        }
        Ok(response)
    }

    fn count_tokens(&self, text: &str) -> usize {
        self.inner.count_tokens(text)
    }
}
