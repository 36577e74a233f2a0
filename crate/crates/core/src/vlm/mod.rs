//! Vision-language and text provider client.
//!
//! A [`Provider`] performs exactly one request. [`VlmClient`] wraps it with the
//! shared rate limiter, retry with exponential backoff and jitter, and latency
//! measurement around the provider call itself.

mod collage;
mod mock;
mod remote;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::config::GenerationParams;
use crate::media::ImagePayload;

pub use collage::{build_collage, Collage, CollageError, TileRect};
pub use mock::{FailureKind, MockFailure, MockProvider, MockRule, ProviderFixture};
pub use remote::{GeminiProvider, OpenAiCompatProvider, GEMINI_KEY_ENV, OPENAI_KEY_ENV};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("provider error: {0}")]
    Fatal(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<ProviderError> },
    #[error("provider misconfigured: {0}")]
    Config(String),
}

impl ProviderError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ProviderError::Transient(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderRequest {
    /// Ordered by source frame number; empty for text-only calls.
    pub images: Vec<ImagePayload>,
    pub prompt: String,
    pub params: GenerationParams,
    /// Frames the request is about. Context for fixtures and logs only.
    #[serde(default)]
    pub frame_numbers: Vec<u64>,
}

impl ProviderRequest {
    pub fn text(prompt: impl Into<String>, params: GenerationParams) -> Self {
        Self {
            images: Vec::new(),
            prompt: prompt.into(),
            params,
            frame_numbers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.prompt.trim().is_empty() {
            return Err(ProviderError::InvalidRequest("prompt must not be empty".into()));
        }
        if !self.frame_numbers.windows(2).all(|w| w[0] < w[1]) {
            return Err(ProviderError::InvalidRequest(
                "images must be ordered by frame number".into(),
            ));
        }
        Ok(())
    }
}

/// What a provider produced for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub blocked: bool,
}

impl Generation {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            blocked: false,
        }
    }

    pub fn blocked() -> Self {
        Self {
            text: String::new(),
            blocked: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResponse {
    pub text: String,
    pub latency_s: f64,
    /// Refused under the safety settings; `text` is then empty.
    pub blocked: bool,
    pub provider_id: String,
    pub attempts: u32,
}

pub trait Provider: Send + Sync {
    fn id(&self) -> &str;

    /// Performs a single attempt.
    fn send(&self, request: &ProviderRequest) -> Result<Generation, ProviderError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and mocks.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
        }
    }

    /// Delay before attempt `failed + 1`, after `failed` failures.
    pub fn delay(&self, failed: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << failed.saturating_sub(1).min(16))
            .min(self.max_delay);
        if self.jitter && !exp.is_zero() {
            exp.mul_f64(rand::rng().random_range(0.5..=1.0))
        } else {
            exp
        }
    }
}

/// Spaces request starts at least `1 / rate` seconds apart across all threads.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_second(rate: f64) -> Self {
        assert!(rate > 0.0 && rate.is_finite(), "rate must be positive");
        Self {
            interval: Duration::from_secs_f64(1.0 / rate),
            next: Mutex::new(None),
        }
    }

    /// Blocks until this caller's slot arrives.
    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = match *next {
                Some(n) if n > now => n,
                _ => now,
            };
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

/// Thread-safe, cheaply cloneable client around one provider.
#[derive(Clone)]
pub struct VlmClient {
    provider: Arc<dyn Provider>,
    retry: RetryPolicy,
    limiter: Option<Arc<RateLimiter>>,
}

impl fmt::Debug for VlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VlmClient")
            .field("provider", &self.provider.id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl VlmClient {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            retry: RetryPolicy::default(),
            limiter: None,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, limiter: Arc<RateLimiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    /// Sends a vision (or text) request, retrying transient failures.
    /// A safety refusal is a successful response with `blocked = true`.
    pub fn describe(&self, request: &ProviderRequest) -> Result<ProviderResponse, ProviderError> {
        request.validate()?;
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let started = Instant::now();
            let outcome = self.provider.send(request);
            let latency_s = started.elapsed().as_secs_f64();
            match outcome {
                Ok(gen) => {
                    return Ok(ProviderResponse {
                        text: if gen.blocked { String::new() } else { gen.text },
                        latency_s,
                        blocked: gen.blocked,
                        provider_id: self.provider.id().to_string(),
                        attempts: attempt,
                    })
                }
                Err(err) if err.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    warn!(attempt, ?delay, frames = ?request.frame_numbers, "retrying after {err}");
                    std::thread::sleep(delay);
                }
                Err(err) if err.is_retryable() => {
                    return Err(ProviderError::Exhausted {
                        attempts: attempt,
                        last: Box::new(err),
                    })
                }
                Err(err) => {
                    debug!(attempt, "non-retryable provider error: {err}");
                    return Err(err);
                }
            }
        }
    }

    pub fn generate_text(&self, prompt: &str, params: &GenerationParams) -> Result<ProviderResponse, ProviderError> {
        self.describe(&ProviderRequest::text(prompt, params.clone()))
    }
}

/// Provider selection in `kind[:argument]` form, as given on the command line.
///
/// * `mock:<fixture.json>`: fixture-driven mock
/// * `echo`: mock that returns its prompt
/// * `gemini:<model>`: Gemini `generateContent` API
/// * `openai:<model>[@<base url>]`: OpenAI-compatible chat completions
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderSpec {
    Mock(std::path::PathBuf),
    Echo,
    Gemini { model: String },
    OpenAi { model: String, base_url: Option<String> },
}

impl FromStr for ProviderSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = match s.split_once(':') {
            Some((k, a)) => (k, Some(a)),
            None => (s, None),
        };
        let need = |what: &str| {
            arg.filter(|a| !a.is_empty())
                .map(str::to_string)
                .ok_or_else(|| format!("`{kind}` provider needs {what}, e.g. `{kind}:<{what}>`"))
        };
        match kind {
            "mock" => Ok(ProviderSpec::Mock(need("fixture path")?.into())),
            "echo" => Ok(ProviderSpec::Echo),
            "gemini" => Ok(ProviderSpec::Gemini { model: need("model")? }),
            "openai" => {
                let spec = need("model")?;
                let (model, base_url) = match spec.split_once('@') {
                    Some((m, u)) => (m.to_string(), Some(u.to_string())),
                    None => (spec, None),
                };
                Ok(ProviderSpec::OpenAi { model, base_url })
            }
            other => Err(format!(
                "unknown provider kind `{other}` (expected mock, echo, gemini or openai)"
            )),
        }
    }
}

impl ProviderSpec {
    /// Builds the provider. Remote providers read their API key from the
    /// environment and fail here when it is missing.
    pub fn build(&self) -> Result<Arc<dyn Provider>, ProviderError> {
        Ok(match self {
            ProviderSpec::Mock(path) => Arc::new(MockProvider::from_file(path)?),
            ProviderSpec::Echo => Arc::new(MockProvider::echo()),
            ProviderSpec::Gemini { model } => Arc::new(GeminiProvider::from_env(model)?),
            ProviderSpec::OpenAi { model, base_url } => {
                Arc::new(OpenAiCompatProvider::from_env(model, base_url.as_deref())?)
            }
        })
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, ProviderSpec::Gemini { .. } | ProviderSpec::OpenAi { .. })
    }
}
