use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use tracing::warn;

use super::{LlmBackend, LlmError, LlmRequest, RetryPolicy};

/// Caps the number of requests awaiting the inner backend at once.
pub struct Bounded<B> {
    inner: B,
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl<B> Bounded<B> {
    pub fn new(inner: B, limit: usize) -> Self {
        Self {
            inner,
            limit: limit.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }
}

struct Permit<'a> {
    count: &'a Mutex<usize>,
    freed: &'a Condvar,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.count.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.freed.notify_one();
    }
}

impl<B: LlmBackend> LlmBackend for Bounded<B> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let _permit = {
            let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
            while *n >= self.limit {
                n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
            }
            *n += 1;
            Permit {
                count: &self.in_flight,
                freed: &self.freed,
            }
        };
        self.inner.complete(request)
    }
}

/// Retries transient failures with exponential backoff.
pub struct Retry<B> {
    inner: B,
    policy: RetryPolicy,
}

impl<B> Retry<B> {
    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Self { inner, policy }
    }
}

impl<B: LlmBackend> LlmBackend for Retry<B> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let attempts = self.policy.attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.inner.complete(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    let delay = self
                        .policy
                        .backoff_ms
                        .saturating_mul(1 << (attempt - 1).min(16));
                    warn!(attempt, delay_ms = delay, error = %e, "retrying LLM request");
                    thread::sleep(Duration::from_millis(delay));
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Passes requests through and keeps every prompt, in arrival order.
pub struct Recorder<B> {
    inner: B,
    prompts: Mutex<Vec<String>>,
}

impl<B> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn clear(&self) {
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clear();
    }
}

impl<B: LlmBackend> LlmBackend for Recorder<B> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.prompts
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(request.prompt.clone());
        self.inner.complete(request)
    }
}
