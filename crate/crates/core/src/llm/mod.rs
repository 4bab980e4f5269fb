//! Black-box LLM access.
//!
//! Every backend implements [`LlmBackend`]. The HTTP backend talks to an
//! OpenAI-compatible chat-completions endpoint; the echo and rule mocks are
//! deterministic oracles that understand the repository's prompt templates;
//! the replay backend makes any of them reproducible from a JSONL cache.
//! [`Bounded`] and [`Retry`] wrap any backend.

mod http;
mod limit;
mod mock;
mod replay;

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::template::{TemplateRegistry, TemplateSet};

pub use http::HttpBackend;
pub use limit::{Bounded, Recorder, Retry};
pub use mock::{EchoMock, RuleMock, GLOBAL_WEIGHT, LOCAL_WEIGHT};
pub use replay::{ReplayBackend, ReplayEntry};

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("network error: {0}")]
    Network(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response body: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("replay cache miss for request {0} in strict mode")]
    ReplayMiss(String),
    #[error("unrecognized prompt structure: {0}")]
    Unrecognized(String),
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("replay cache {path}: {message}")]
    Cache { path: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Network(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub template_id: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl LlmRequest {
    pub fn new(template_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            template_id: template_id.into(),
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }

    /// Digest of the canonical JSON encoding of the request.
    pub fn request_hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        sha256_hex(&canonical)
    }

    pub fn prompt_digest(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for Box<T> {
    fn complete(&self, request: &LlmRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            backoff_ms: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Http {
        endpoint: String,
        #[serde(default)]
        model: String,
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        system_preamble: Option<String>,
        #[serde(default = "default_timeout_ms")]
        timeout_ms: u64,
    },
    EchoMock,
    RuleMock,
    Replay {
        cache_path: PathBuf,
        #[serde(default)]
        strict: bool,
        #[serde(default)]
        inner: Option<Box<BackendConfig>>,
    },
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout_ms() -> u64 {
    120_000
}

fn default_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::RuleMock,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Builds the backend stack: `Bounded(Retry(http))` for remote calls,
    /// `Bounded(mock)` for mocks, and a replay layer around its inner stack.
    pub fn build(&self, registry: &TemplateRegistry) -> Result<Arc<dyn LlmBackend>, LlmError> {
        if self.max_in_flight == 0 {
            return Err(LlmError::Config("max_in_flight must be at least 1".into()));
        }
        let backend: Arc<dyn LlmBackend> = match &self.kind {
            BackendKind::Http {
                endpoint,
                model,
                api_key_env,
                system_preamble,
                timeout_ms,
            } => {
                let key = std::env::var(api_key_env).ok();
                let http =
                    HttpBackend::new(endpoint, model, key, system_preamble.clone(), *timeout_ms)?;
                Arc::new(Bounded::new(
                    Retry::new(http, self.retry),
                    self.max_in_flight,
                ))
            }
            BackendKind::EchoMock => Arc::new(Bounded::new(
                EchoMock::new(registry.clone()),
                self.max_in_flight,
            )),
            BackendKind::RuleMock => Arc::new(Bounded::new(
                RuleMock::new(registry.clone()),
                self.max_in_flight,
            )),
            BackendKind::Replay {
                cache_path,
                strict,
                inner,
            } => {
                let inner = match inner {
                    Some(cfg) => Some(cfg.build(registry)?),
                    None => None,
                };
                Arc::new(ReplayBackend::open(cache_path, *strict, inner)?)
            }
        };
        Ok(backend)
    }
}

/// A backend bound to one template set and fixed decoding parameters.
#[derive(Clone)]
pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    templates: TemplateSet,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>, templates: TemplateSet) -> Self {
        Self {
            backend,
            templates,
            max_tokens: 512,
            temperature: 0.0,
        }
    }

    pub fn templates(&self) -> &TemplateSet {
        &self.templates
    }

    pub fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let request = LlmRequest {
            template_id: self.templates.id.clone(),
            prompt: prompt.to_string(),
            max_tokens: self.max_tokens,
            temperature: self.temperature,
        };
        self.backend.complete(&request)
    }
}
