use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendReply, ChatBackend, GatewayError, ModelConfig, Usage};

/// Chat-completions client: one JSON POST per prompt, with the API key taken
/// from `NUMPIPE_<ROLE>_API_KEY` when set.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: &ModelConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(format!("cannot build HTTP client: {e}")))?;
        let api_key = std::env::var(config.role.api_key_var()).ok().filter(|k| !k.is_empty());
        Ok(Self { client, api_key })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, config: &ModelConfig, prompt: &str) -> Result<BackendReply, BackendError> {
        let body = ChatRequest {
            model: &config.model_name,
            messages: [Message { role: "user", content: prompt }],
            temperature: config.temperature,
            max_tokens: config.max_output_tokens,
        };
        let mut request = self.client.post(&config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| BackendError::Retryable(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            let message = format!("HTTP {status}: {}", text.chars().take(300).collect::<String>());
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                BackendError::Retryable(message)
            } else {
                BackendError::Fatal(message)
            });
        }
        let parsed: ChatResponse =
            response.json().map_err(|e| BackendError::Retryable(format!("malformed response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Retryable("response has no choices".into()))?;
        Ok(BackendReply {
            text: choice.message.content.unwrap_or_default(),
            usage: parsed.usage.map(|u| Usage { input_tokens: u.prompt_tokens, output_tokens: u.completion_tokens }),
            hit_length_limit: choice.finish_reason.as_deref() == Some("length"),
        })
    }
}
