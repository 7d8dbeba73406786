use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ChatProvider, CompletionRequest, ProviderError};

pub const ENV_BASE_URL: &str = "HABITUS_LLM_BASE_URL";
pub const ENV_API_KEY: &str = "HABITUS_LLM_API_KEY";
pub const ENV_MODEL: &str = "HABITUS_LLM_MODEL";

/// Connection settings for an OpenAI-style chat completion endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderSettings {
    pub base_url: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_timeout_secs() -> u64 {
    120
}

impl Default for ProviderSettings {
    fn default() -> Self {
        ProviderSettings {
            base_url: "https://api.openai.com/v1".to_owned(),
            api_key: None,
            timeout_secs: default_timeout_secs(),
        }
    }
}

impl ProviderSettings {
    /// Overlay `HABITUS_LLM_BASE_URL` and `HABITUS_LLM_API_KEY` (falling back
    /// to `OPENAI_API_KEY`) on top of `self`.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_BASE_URL) {
            self.base_url = url;
        }
        if let Ok(key) = std::env::var(ENV_API_KEY).or_else(|_| std::env::var("OPENAI_API_KEY")) {
            self.api_key = Some(key);
        }
        self
    }
}

/// Blocking client for `POST {base_url}/chat/completions`.
pub struct HttpProvider {
    settings: ProviderSettings,
    agent: ureq::Agent,
    id: String,
}

impl HttpProvider {
    pub fn new(settings: ProviderSettings) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let id = format!("http:{}", settings.base_url);
        HttpProvider { settings, agent, id }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.settings.base_url.trim_end_matches('/'))
    }
}

/// Request body in the chat-completion wire format.
pub(crate) fn request_body(request: &CompletionRequest<'_>) -> Value {
    let cfg = request.config;
    let mut body = json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
        "frequency_penalty": cfg.frequency_penalty,
        "presence_penalty": cfg.presence_penalty,
    });
    if !cfg.stop_sequences.is_empty() {
        body["stop"] = json!(cfg.stop_sequences);
    }
    body
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatProvider for HttpProvider {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest<'_>) -> Result<String, ProviderError> {
        let mut call = self.agent.post(self.endpoint());
        if let Some(key) = &self.settings.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(request_body(request))
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 {
            let retry_after = response
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(Duration::from_secs_f64);
            return Err(ProviderError::RateLimited { retry_after });
        }
        if status >= 500 || status == 408 {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            let body = response.body_mut().read_to_string().unwrap_or_default();
            return Err(ProviderError::Fatal(format!("HTTP {status}: {body}")));
        }
        let parsed: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::Fatal(format!("malformed completion response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Fatal("completion response has no choices".into()))
    }
}
