//! Translator and quality-estimator backends.
//!
//! Real models sit behind a small JSON-over-HTTP protocol ([`http`]); the
//! [`mock`] backends are deterministic stand-ins used by tests and by the
//! synthetic experiments.

pub mod http;
pub mod mock;
pub mod synth;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::corpus::SentencePair;
use crate::prompt::PromptTemplate;

pub use http::{HttpEstimator, HttpOptions, HttpTranslator};
pub use mock::{
    CoverageTranslator, EchoTranslator, FixedTranslator, NoisyOracleEstimator, OracleEstimator, ReferenceTranslator,
    ScriptedEstimator,
};
pub use synth::{synthesize_qe_labels, QeLabelRecord, SynthSummary};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("server returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("prompt too long: {0}")]
    PromptTooLong(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("no reference known for query {0:?}")]
    UnknownQuery(String),
    #[error("invalid backend spec {spec:?}: {reason}")]
    BadSpec { spec: String, reason: String },
}

impl BackendError {
    /// Connection failures, timeouts, throttling and server errors.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }

    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Translation {
    pub text: String,
    /// Prompt length as counted by the backend's own tokenizer, if reported.
    pub prompt_tokens: Option<usize>,
}

impl Translation {
    pub fn new(text: impl Into<String>) -> Self {
        Translation {
            text: text.into(),
            prompt_tokens: None,
        }
    }
}

/// First line of a completion, trimmed.
pub fn first_line(completion: &str) -> &str {
    completion.trim_start().lines().next().unwrap_or("").trim()
}

/// A model that completes a few-shot prompt. Must be deterministic for a
/// fixed configuration.
pub trait Translator: Send + Sync {
    fn name(&self) -> &str;

    fn max_prompt_tokens(&self) -> Option<usize> {
        None
    }

    /// Exact prompt length in backend tokens, when the backend can count
    /// locally. Callers fall back to [`crate::prompt::estimate_length`].
    fn count_tokens(&self, _prompt: &str) -> Option<usize> {
        None
    }

    fn translate(&self, prompt: &str) -> Result<Translation, BackendError>;
}

/// Reference-free sentence-level quality estimate on the BLEU scale.
pub trait Estimator: Send + Sync {
    fn name(&self) -> &str;

    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError>;
}

impl<T: Translator + ?Sized> Translator for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn max_prompt_tokens(&self) -> Option<usize> {
        (**self).max_prompt_tokens()
    }
    fn count_tokens(&self, prompt: &str) -> Option<usize> {
        (**self).count_tokens(prompt)
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        (**self).translate(prompt)
    }
}

impl<T: Estimator + ?Sized> Estimator for Arc<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        (**self).estimate(source, hypothesis)
    }
}

/// Source sentence → reference translation, used by the mock backends that
/// need the hidden reference of the query. The first pair wins on duplicate
/// sources.
#[derive(Debug, Clone, Default)]
pub struct ReferenceTable {
    map: HashMap<String, String>,
}

impl ReferenceTable {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a SentencePair>) -> Self {
        let mut map = HashMap::new();
        for p in pairs {
            map.entry(p.source.clone()).or_insert_with(|| p.target.clone());
        }
        ReferenceTable { map }
    }

    pub fn get(&self, source: &str) -> Result<&str, BackendError> {
        self.map
            .get(source)
            .map(String::as_str)
            .ok_or_else(|| BackendError::UnknownQuery(source.to_string()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Exponential backoff for retryable backend errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy {
            max_retries: 0,
            ..Default::default()
        }
    }

    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff
            .saturating_mul(2u32.saturating_pow(attempt))
            .min(self.max_backoff)
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    let wait = self.backoff(attempt);
                    log::debug!("retrying after {e} (attempt {}, waiting {wait:?})", attempt + 1);
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// Wraps a backend with a [`RetryPolicy`].
///
/// After [`Retrying::BREAKER_THRESHOLD`] consecutive calls have ended in a
/// transport error, retries are skipped until a call succeeds again, so a
/// dead server fails a run quickly instead of backing off on every item.
#[derive(Debug, Clone)]
pub struct Retrying<B> {
    pub inner: B,
    pub policy: RetryPolicy,
    consecutive_transport_failures: Arc<AtomicUsize>,
}

impl<B> Retrying<B> {
    pub const BREAKER_THRESHOLD: usize = 5;

    pub fn new(inner: B, policy: RetryPolicy) -> Self {
        Retrying {
            inner,
            policy,
            consecutive_transport_failures: Arc::new(AtomicUsize::new(0)),
        }
    }

    fn call<T>(&self, mut f: impl FnMut() -> Result<T, BackendError>) -> Result<T, BackendError> {
        let failures = &self.consecutive_transport_failures;
        let result = if failures.load(Ordering::SeqCst) >= Self::BREAKER_THRESHOLD {
            f()
        } else {
            self.policy.run(f)
        };
        match &result {
            Err(e) if e.is_transport() => {
                failures.fetch_add(1, Ordering::SeqCst);
            }
            _ => failures.store(0, Ordering::SeqCst),
        }
        result
    }
}

impl<B: Translator> Translator for Retrying<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn max_prompt_tokens(&self) -> Option<usize> {
        self.inner.max_prompt_tokens()
    }
    fn count_tokens(&self, prompt: &str) -> Option<usize> {
        self.inner.count_tokens(prompt)
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        self.call(|| self.inner.translate(prompt))
    }
}

impl<B: Estimator> Estimator for Retrying<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        self.call(|| self.inner.estimate(source, hypothesis))
    }
}

/// Counts logical calls made through it (retries inside are not counted).
#[derive(Debug, Clone)]
pub struct Counted<B> {
    pub inner: B,
    calls: Arc<AtomicUsize>,
}

impl<B> Counted<B> {
    pub fn new(inner: B) -> Self {
        Counted {
            inner,
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: Translator> Translator for Counted<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn max_prompt_tokens(&self) -> Option<usize> {
        self.inner.max_prompt_tokens()
    }
    fn count_tokens(&self, prompt: &str) -> Option<usize> {
        self.inner.count_tokens(prompt)
    }
    fn translate(&self, prompt: &str) -> Result<Translation, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.translate(prompt)
    }
}

impl<B: Estimator> Estimator for Counted<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn estimate(&self, source: &str, hypothesis: &str) -> Result<f64, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.estimate(source, hypothesis)
    }
}

fn bad_spec(spec: &str, reason: impl Into<String>) -> BackendError {
    BackendError::BadSpec {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

fn is_url(spec: &str) -> bool {
    spec.starts_with("http://") || spec.starts_with("https://")
}

/// Builds a translator from a spec string: `mock:echo`, `mock:coverage`,
/// `mock:reference`, `mock:fixed:<text>`, or an `http(s)://` endpoint.
pub fn translator_from_spec(
    spec: &str,
    references: Arc<ReferenceTable>,
    template: &PromptTemplate,
    http: &HttpOptions,
) -> Result<Arc<dyn Translator>, BackendError> {
    if is_url(spec) {
        return Ok(Arc::new(HttpTranslator::new(spec, http.clone())?));
    }
    let Some(rest) = spec.strip_prefix("mock:") else {
        return Err(bad_spec(spec, "expected mock:<kind> or an http(s) URL"));
    };
    let t: Arc<dyn Translator> = match rest.split_once(':') {
        Some(("fixed", text)) => Arc::new(FixedTranslator::new(text)),
        _ => match rest {
            "echo" => Arc::new(EchoTranslator::new(template.clone())),
            "coverage" => Arc::new(CoverageTranslator::new(references, template.clone())),
            "reference" => Arc::new(ReferenceTranslator::new(references, template.clone())),
            _ => return Err(bad_spec(spec, "unknown mock translator")),
        },
    };
    Ok(t)
}

/// Builds an estimator from a spec string: `mock:oracle`,
/// `mock:noisy:<sigma>[:<seed>]`, or an `http(s)://` endpoint.
pub fn estimator_from_spec(
    spec: &str,
    references: Arc<ReferenceTable>,
    default_seed: u64,
    http: &HttpOptions,
) -> Result<Arc<dyn Estimator>, BackendError> {
    if is_url(spec) {
        return Ok(Arc::new(HttpEstimator::new(spec, http.clone())?));
    }
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["mock", "oracle"] => Ok(Arc::new(OracleEstimator::new(references))),
        ["mock", "noisy", sigma, rest @ ..] if rest.len() <= 1 => {
            let sigma: f64 = sigma
                .parse()
                .ok()
                .filter(|s: &f64| *s >= 0.0 && s.is_finite())
                .ok_or_else(|| bad_spec(spec, "sigma must be a non-negative number"))?;
            let seed = match rest.first() {
                Some(s) => s.parse().map_err(|_| bad_spec(spec, "seed must be an integer"))?,
                None => default_seed,
            };
            Ok(Arc::new(NoisyOracleEstimator::new(references, sigma, seed)))
        }
        _ => Err(bad_spec(
            spec,
            "expected mock:oracle, mock:noisy:<sigma>[:<seed>] or an http(s) URL",
        )),
    }
}
