//! Provider-agnostic chat completion.
//!
//! [`Gateway`] wraps a [`ChatProvider`] with bounded retries, an optional
//! token-bucket rate limiter and a JSON-lines record/replay cache. Prompt
//! construction for every LLM call the engine makes lives in [`templates`].

mod cache;
mod http;
mod mock;
mod retry;
pub mod templates;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{CacheError, CacheMode, LlmRequestRecord, ReplayCache};
pub use http::{HttpProvider, ProviderSettings, ENV_API_KEY, ENV_BASE_URL, ENV_MODEL};
pub use mock::MockProvider;
pub use retry::{RetryPolicy, TokenBucket};

use crate::digest::json_digest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage { role: Role::Assistant, content: content.into() }
    }
}

/// Check that every message has content and that, after any leading system
/// messages, roles alternate user/assistant starting and ending with user.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    let invalid = |why: String| Err(GatewayError::InvalidRequest(why));
    if let Some(i) = messages.iter().position(|m| m.content.trim().is_empty()) {
        return invalid(format!("message {i} has empty content"));
    }
    let first_turn = messages
        .iter()
        .position(|m| m.role != Role::System)
        .unwrap_or(messages.len());
    let turns = &messages[first_turn..];
    if turns.is_empty() {
        return invalid("no user message".into());
    }
    for (i, msg) in turns.iter().enumerate() {
        let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
        if msg.role != want {
            return invalid(format!("message {} should be {want:?}, got {:?}", first_turn + i, msg.role));
        }
    }
    if turns.len().is_multiple_of(2) {
        return invalid("last message must come from the user".into());
    }
    Ok(())
}

/// Sampling parameters for one completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub frequency_penalty: f64,
    #[serde(default)]
    pub presence_penalty: f64,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            model_id: "gpt-3.5-turbo".to_owned(),
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 2048,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            stop_sequences: Vec::new(),
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |why: &str| Err(GatewayError::InvalidRequest(why.to_owned()));
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return bad("temperature must be >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be >= 1");
        }
        Ok(())
    }

    /// Stop sequences marking the start of either speaker's next line.
    pub fn with_agent_stops(mut self, user_name: &str, system_name: &str) -> Self {
        self.stop_sequences = vec![format!("\n{user_name}:"), format!("\n{system_name}:")];
        self
    }
}

/// Everything that identifies one completion call. `sample` distinguishes
/// independent draws for the same prompt.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct CompletionRequest<'a> {
    pub model_id: &'a str,
    pub config: &'a GenerationConfig,
    pub messages: &'a [ChatMessage],
    pub sample: u32,
}

impl CompletionRequest<'_> {
    /// Content address of the request: SHA-256 of its canonical JSON.
    pub fn hash(&self) -> String {
        json_digest(self)
    }
}

/// Failure reported by a provider for a single attempt.
#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

impl ProviderError {
    fn is_retryable(&self) -> bool {
        !matches!(self, ProviderError::Fatal(_))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider unavailable after {attempts} attempts: {last}")]
    ProviderUnavailable { attempts: u32, last: String },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32, retry_after: Option<Duration> },
    #[error("no recorded response for request {0} in replay mode")]
    CacheMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay cache: {0}")]
    Cache(#[from] CacheError),
}

/// A chat-completion backend.
pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    /// Return the raw completion text for one attempt.
    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError>;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// Cut `text` at the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

/// Retrying, rate-limited, cache-aware front of a [`ChatProvider`].
pub struct Gateway {
    provider: Box<dyn ChatProvider>,
    retry: RetryPolicy,
    limiter: Option<TokenBucket>,
    cache: Option<Arc<ReplayCache>>,
    mode: CacheMode,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("provider", &self.provider.provider_id())
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(provider: impl ChatProvider + 'static) -> Self {
        Gateway {
            provider: Box::new(provider),
            retry: RetryPolicy::default(),
            limiter: None,
            cache: None,
            mode: CacheMode::Off,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_rate_limit(mut self, limiter: TokenBucket) -> Self {
        self.limiter = Some(limiter);
        self
    }

    /// Attach a replay cache. `CacheMode::Off` detaches it.
    pub fn with_cache(mut self, cache: Arc<ReplayCache>, mode: CacheMode) -> Self {
        self.cache = (mode != CacheMode::Off).then_some(cache);
        self.mode = mode;
        self
    }

    pub fn provider_id(&self) -> &str {
        self.provider.provider_id()
    }

    pub fn cache_mode(&self) -> CacheMode {
        self.mode
    }

    pub fn complete(&self, messages: &[ChatMessage], config: &GenerationConfig) -> Result<String, GatewayError> {
        self.complete_sample(messages, config, 0)
    }

    /// Complete the `sample`-th independent draw for this prompt, truncated
    /// at the first stop sequence.
    pub fn complete_sample(
        &self,
        messages: &[ChatMessage],
        config: &GenerationConfig,
        sample: u32,
    ) -> Result<String, GatewayError> {
        validate_messages(messages)?;
        config.validate()?;
        let request = CompletionRequest {
            model_id: &config.model_id,
            config,
            messages,
            sample,
        };
        let raw = self.raw_completion(&request)?;
        Ok(truncate_at_stop(&raw, &config.stop_sequences).to_owned())
    }

    fn raw_completion(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        let Some(cache) = &self.cache else {
            return self.call_provider(request);
        };
        let hash = request.hash();
        if let Some(record) = cache.get(&hash) {
            log::debug!("replay cache hit {hash}");
            return Ok(record.response_text);
        }
        if self.mode == CacheMode::Replay {
            return Err(GatewayError::CacheMiss(hash));
        }
        let text = self.call_provider(request)?;
        cache.append(LlmRequestRecord::new(hash, request, &text, self.provider.provider_id()))?;
        Ok(text)
    }

    fn call_provider(&self, request: &CompletionRequest<'_>) -> Result<String, GatewayError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let err = match self.provider.complete(request) {
                Ok(text) => return Ok(text),
                Err(err) => err,
            };
            if !err.is_retryable() || attempt >= self.retry.max_attempts {
                return Err(match err {
                    ProviderError::RateLimited { retry_after } => {
                        GatewayError::RateLimited { attempts: attempt, retry_after }
                    }
                    other => GatewayError::ProviderUnavailable {
                        attempts: attempt,
                        last: other.to_string(),
                    },
                });
            }
            let mut delay = self.retry.delay(attempt);
            if let ProviderError::RateLimited { retry_after: Some(after) } = err {
                delay = delay.max(after);
            }
            log::warn!("provider attempt {attempt} failed ({err}); retrying in {delay:?}");
            std::thread::sleep(delay);
        }
    }
}
