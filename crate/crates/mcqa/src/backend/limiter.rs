//! Blocking token-bucket rate limiter and a counting semaphore for capping
//! in-flight requests. Both are shared across worker threads.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

struct BucketState {
    tokens: f64,
    last_refill: Instant,
}

/// Token bucket sized for a per-minute request limit. The bucket starts
/// full, so a burst up to the per-minute limit goes through immediately and
/// sustained traffic settles at the configured rate.
pub struct TokenBucket {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<BucketState>,
}

impl TokenBucket {
    pub fn per_minute(requests_per_minute: f64) -> Self {
        let capacity = requests_per_minute.max(1.0);
        TokenBucket {
            capacity,
            refill_per_sec: requests_per_minute.max(f64::MIN_POSITIVE) / 60.0,
            state: Mutex::new(BucketState {
                tokens: capacity,
                last_refill: Instant::now(),
            }),
        }
    }

    fn refill(&self, state: &mut BucketState) {
        let now = Instant::now();
        let elapsed = now.duration_since(state.last_refill).as_secs_f64();
        state.tokens = (state.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        state.last_refill = now;
    }

    /// Takes one token if available without waiting.
    pub fn try_acquire(&self) -> bool {
        let mut state = self.state.lock().expect("bucket lock");
        self.refill(&mut state);
        if state.tokens >= 1.0 {
            state.tokens -= 1.0;
            true
        } else {
            false
        }
    }

    /// Blocks until a token is available, then takes it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().expect("bucket lock");
                self.refill(&mut state);
                if state.tokens >= 1.0 {
                    state.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.tokens) / self.refill_per_sec)
            };
            std::thread::sleep(wait.max(Duration::from_millis(1)));
        }
    }
}

/// Minimal counting semaphore; permits release on guard drop.
pub struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

pub struct SemaphorePermit<'a> {
    semaphore: &'a Semaphore,
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> SemaphorePermit<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        SemaphorePermit { semaphore: self }
    }
}

impl Drop for SemaphorePermit<'_> {
    fn drop(&mut self) {
        let mut permits = self.semaphore.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.semaphore.available.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn burst_up_to_capacity_then_throttled() {
        let bucket = TokenBucket::per_minute(600.0); // 10/sec refill
        for _ in 0..600 {
            assert!(bucket.try_acquire());
        }
        assert!(!bucket.try_acquire(), "bucket drained");
        let start = Instant::now();
        bucket.acquire();
        let waited = start.elapsed();
        assert!(
            waited >= Duration::from_millis(50),
            "expected ~100ms wait, got {waited:?}"
        );
    }

    #[test]
    fn forty_acquires_at_high_rate_are_fast() {
        // Sanity check on units: 2400/min refills 40/sec, so 40 acquires
        // after the initial burst of 2400 are instantaneous.
        let bucket = TokenBucket::per_minute(2400.0);
        let start = Instant::now();
        for _ in 0..40 {
            bucket.acquire();
        }
        assert!(start.elapsed() < Duration::from_secs(1));
    }

    #[test]
    fn semaphore_caps_concurrency() {
        let semaphore = Arc::new(Semaphore::new(2));
        let in_flight = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let semaphore = Arc::clone(&semaphore);
            let in_flight = Arc::clone(&in_flight);
            let peak = Arc::clone(&peak);
            handles.push(std::thread::spawn(move || {
                let _permit = semaphore.acquire();
                let now = in_flight.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(20));
                in_flight.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for handle in handles {
            handle.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
