//! Access to the model roles: retries, usage capture, pricing, per-role
//! concurrency caps, and the deterministic mock backend.

mod http;
mod ledger;
pub mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chunking::estimate_tokens;
use crate::parsers::Templates;

pub use http::HttpBackend;
pub use ledger::{total_cost, ChatExchange, CostLedger, Money, MoneyParseError, Pricing};
pub use mock::{MockBackend, MockScenario, ScenarioError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Main,
    Extractor,
    Filter,
    Judge,
}

impl ModelRole {
    pub const ALL: [ModelRole; 4] = [ModelRole::Main, ModelRole::Extractor, ModelRole::Filter, ModelRole::Judge];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelRole::Main => "main",
            ModelRole::Extractor => "extractor",
            ModelRole::Filter => "filter",
            ModelRole::Judge => "judge",
        }
    }

    /// Environment variable holding this role's API key.
    pub fn api_key_var(self) -> String {
        format!("NUMPIPE_{}_API_KEY", self.as_str().to_uppercase())
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const MOCK_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub role: ModelRole,
    /// Chat-completions URL, or `mock`.
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub price_in: Money,
    pub price_out: Money,
    pub max_retries: u32,
    pub timeout_ms: u64,
    /// First retry delay; doubles on each further retry.
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    /// Prompts longer than this are cut down by callers that can shorten
    /// them (the baselines).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_window_tokens: Option<usize>,
}

impl ModelConfig {
    /// Offline defaults: every role starts on the mock backend. Only the main
    /// role is priced.
    pub fn default_for(role: ModelRole) -> Self {
        let (model_name, price_in, price_out) = match role {
            ModelRole::Main => ("gemini-1.5-flash", Money::from_dollars(5), Money::from_dollars(15)),
            ModelRole::Extractor => ("qwen2.5-7b-instruct", Money::ZERO, Money::ZERO),
            ModelRole::Filter => ("qwen2.5-1.5b-instruct", Money::ZERO, Money::ZERO),
            ModelRole::Judge => ("gpt-4o", Money::ZERO, Money::ZERO),
        };
        Self {
            role,
            endpoint: MOCK_ENDPOINT.to_string(),
            model_name: model_name.to_string(),
            temperature: 0.0,
            max_output_tokens: 4096,
            price_in,
            price_out,
            max_retries: 2,
            timeout_ms: 60_000,
            retry_backoff_ms: 500,
            max_in_flight: 8,
            context_window_tokens: None,
        }
    }

    pub fn pricing(&self) -> Pricing {
        Pricing { price_in: self.price_in, price_out: self.price_out }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == MOCK_ENDPOINT
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(format!("{} model: {m}", self.role)));
        if !(self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.endpoint.trim().is_empty() {
            return bad("endpoint is empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("no model configured for role {0}")]
    RoleNotConfigured(ModelRole),
    #[error("{role} model unreachable after {attempts} attempts: {message}")]
    Transport { role: ModelRole, attempts: u32, message: String },
    #[error("{role} model rejected the request: {message}")]
    Rejected { role: ModelRole, message: String },
    #[error("mock backend does not recognize the prompt template")]
    UnrecognizedTemplate,
    #[error("invalid model configuration: {0}")]
    Config(String),
}

/// Token usage as reported by a provider.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendReply {
    pub text: String,
    pub usage: Option<Usage>,
    /// The provider stopped because of the output cap.
    pub hit_length_limit: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    Retryable(String),
    /// Retrying will not help.
    Fatal(String),
    UnrecognizedTemplate,
}

/// One way of turning a prompt into a reply.
pub trait ChatBackend: Send + Sync {
    fn send(&self, config: &ModelConfig, prompt: &str) -> Result<BackendReply, BackendError>;
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

struct RoleSlot {
    config: ModelConfig,
    backend: Arc<dyn ChatBackend>,
    in_flight: Arc<Semaphore>,
}

/// Routes prompts to role backends and records every attempt.
///
/// [`fork`](Self::fork) shares backends and concurrency caps but starts an
/// empty ledger, so concurrent runs can be accounted separately.
pub struct Gateway {
    roles: BTreeMap<ModelRole, Arc<RoleSlot>>,
    ledger: Mutex<Vec<ChatExchange>>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway").field("roles", &self.roles.keys().collect::<Vec<_>>()).finish()
    }
}

impl Gateway {
    /// Builds backends for `models`. Mock endpoints use `scenario`.
    pub fn new(
        models: impl IntoIterator<Item = ModelConfig>,
        scenario: Arc<MockScenario>,
        templates: Templates,
    ) -> Result<Self, GatewayError> {
        let mock: Arc<dyn ChatBackend> = Arc::new(MockBackend::new(scenario, templates));
        let mut gateway = Self { roles: BTreeMap::new(), ledger: Mutex::new(Vec::new()) };
        for config in models {
            let backend: Arc<dyn ChatBackend> = if config.is_mock() {
                mock.clone()
            } else {
                Arc::new(HttpBackend::new(&config)?)
            };
            gateway = gateway.with_backend(config, backend)?;
        }
        Ok(gateway)
    }

    /// An empty gateway; add roles with [`with_backend`](Self::with_backend).
    pub fn empty() -> Self {
        Self { roles: BTreeMap::new(), ledger: Mutex::new(Vec::new()) }
    }

    pub fn with_backend(mut self, config: ModelConfig, backend: Arc<dyn ChatBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let in_flight = Arc::new(Semaphore::new(config.max_in_flight));
        self.roles.insert(config.role, Arc::new(RoleSlot { config, backend, in_flight }));
        Ok(self)
    }

    pub fn fork(&self) -> Self {
        Self { roles: self.roles.clone(), ledger: Mutex::new(Vec::new()) }
    }

    pub fn config(&self, role: ModelRole) -> Option<&ModelConfig> {
        self.roles.get(&role).map(|s| &s.config)
    }

    pub fn has_role(&self, role: ModelRole) -> bool {
        self.roles.contains_key(&role)
    }

    pub fn pricing(&self) -> BTreeMap<ModelRole, Pricing> {
        self.roles.iter().map(|(r, s)| (*r, s.config.pricing())).collect()
    }

    /// Sends `prompt` to the `role` model, retrying transport failures with
    /// exponential backoff. Every attempt lands in the ledger.
    pub fn complete(&self, role: ModelRole, call_site: &str, prompt: &str) -> Result<ChatExchange, GatewayError> {
        if prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let slot = self.roles.get(&role).ok_or(GatewayError::RoleNotConfigured(role))?;
        let config = &slot.config;
        let attempts = config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            if attempt > 1 {
                let shift = (attempt - 2).min(16);
                std::thread::sleep(Duration::from_millis(config.retry_backoff_ms.saturating_mul(1 << shift)));
            }
            let started = Instant::now();
            let outcome = {
                let _permit = slot.in_flight.acquire();
                slot.backend.send(config, prompt)
            };
            let latency = started.elapsed();
            match outcome {
                Ok(reply) => {
                    let (input_tokens, output_tokens, usage_estimated) = match reply.usage {
                        Some(u) => (u.input_tokens, u.output_tokens, false),
                        None => (estimate_tokens(prompt) as u64, estimate_tokens(&reply.text) as u64, true),
                    };
                    let truncated = reply.hit_length_limit || output_tokens >= config.max_output_tokens as u64;
                    if truncated {
                        tracing::warn!(%role, call_site, output_tokens, "reply reached the output token cap");
                    }
                    let exchange = ChatExchange {
                        role,
                        call_site: call_site.to_string(),
                        attempt,
                        prompt: prompt.to_string(),
                        response: reply.text,
                        input_tokens,
                        output_tokens,
                        usage_estimated,
                        truncated,
                        error: None,
                        latency,
                    };
                    self.record(exchange.clone());
                    return Ok(exchange);
                }
                Err(err) => {
                    let (message, retry) = match &err {
                        BackendError::Retryable(m) => (m.clone(), true),
                        BackendError::Fatal(m) => (m.clone(), false),
                        BackendError::UnrecognizedTemplate => ("unrecognized prompt template".to_string(), false),
                    };
                    tracing::debug!(%role, call_site, attempt, %message, "model call failed");
                    self.record(ChatExchange {
                        role,
                        call_site: call_site.to_string(),
                        attempt,
                        prompt: prompt.to_string(),
                        response: String::new(),
                        input_tokens: 0,
                        output_tokens: 0,
                        usage_estimated: false,
                        truncated: false,
                        error: Some(message.clone()),
                        latency,
                    });
                    match err {
                        BackendError::UnrecognizedTemplate => return Err(GatewayError::UnrecognizedTemplate),
                        BackendError::Fatal(_) => return Err(GatewayError::Rejected { role, message }),
                        BackendError::Retryable(_) if retry => last_error = message,
                        BackendError::Retryable(_) => unreachable!(),
                    }
                }
            }
        }
        Err(GatewayError::Transport { role, attempts, message: last_error })
    }

    fn record(&self, exchange: ChatExchange) {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner()).push(exchange);
    }

    /// Snapshot of the ledger in call-site order.
    pub fn ledger(&self) -> CostLedger {
        let mut ledger = CostLedger::new(self.pricing());
        ledger.entries = self.ledger.lock().unwrap_or_else(|e| e.into_inner()).clone();
        ledger.sort();
        ledger
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _config: &ModelConfig, _prompt: &str) -> Result<BackendReply, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Retryable("connection reset".into()))
            } else {
                Ok(BackendReply { text: "ok".into(), usage: None, hit_length_limit: false })
            }
        }
    }

    fn flaky(failures: usize) -> Arc<Flaky> {
        Arc::new(Flaky { failures, calls: 0.into(), in_flight: 0.into(), peak: 0.into() })
    }

    fn config(max_retries: u32) -> ModelConfig {
        ModelConfig { max_retries, retry_backoff_ms: 1, ..ModelConfig::default_for(ModelRole::Main) }
    }

    #[test]
    fn empty_prompt_is_rejected_before_any_call() {
        let backend = flaky(0);
        let gw = Gateway::empty().with_backend(config(2), backend.clone()).unwrap();
        assert_eq!(gw.complete(ModelRole::Main, "x", "  \n").unwrap_err(), GatewayError::EmptyPrompt);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 0);
        assert!(gw.ledger().entries.is_empty());
    }

    #[test]
    fn retries_then_succeeds_and_records_every_attempt() {
        let backend = flaky(2);
        let gw = Gateway::empty().with_backend(config(2), backend.clone()).unwrap();
        let ex = gw.complete(ModelRole::Main, "01-analyze", "hello there").unwrap();
        assert_eq!(ex.attempt, 3);
        assert!(ex.usage_estimated);
        assert_eq!(ex.input_tokens, estimate_tokens("hello there") as u64);
        let ledger = gw.ledger();
        assert_eq!(ledger.entries.len(), 3);
        assert_eq!(ledger.entries.iter().filter(|e| e.error.is_some()).count(), 2);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let backend = flaky(usize::MAX);
        let gw = Gateway::empty().with_backend(config(2), backend.clone()).unwrap();
        let err = gw.complete(ModelRole::Main, "x", "hi").unwrap_err();
        assert!(matches!(err, GatewayError::Transport { attempts: 3, .. }), "{err:?}");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn unconfigured_role() {
        let gw = Gateway::empty();
        assert_eq!(gw.complete(ModelRole::Judge, "x", "hi").unwrap_err(), GatewayError::RoleNotConfigured(ModelRole::Judge));
    }

    #[test]
    fn in_flight_cap_is_enforced() {
        let backend = flaky(0);
        let cfg = ModelConfig { max_in_flight: 3, ..config(0) };
        let gw = Gateway::empty().with_backend(cfg, backend.clone()).unwrap();
        std::thread::scope(|s| {
            for i in 0..24 {
                let gw = &gw;
                s.spawn(move || gw.complete(ModelRole::Main, &format!("{i:03}"), "hi").unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
        let ledger = gw.ledger();
        assert_eq!(ledger.entries.len(), 24);
        assert!(ledger.entries.windows(2).all(|w| w[0].call_site < w[1].call_site));
    }

    #[test]
    fn truncation_is_flagged() {
        struct Long;
        impl ChatBackend for Long {
            fn send(&self, _: &ModelConfig, _: &str) -> Result<BackendReply, BackendError> {
                Ok(BackendReply { text: "x".into(), usage: Some(Usage { input_tokens: 1, output_tokens: 16 }), hit_length_limit: false })
            }
        }
        let cfg = ModelConfig { max_output_tokens: 16, ..config(0) };
        let gw = Gateway::empty().with_backend(cfg, Arc::new(Long)).unwrap();
        assert!(gw.complete(ModelRole::Main, "x", "hi").unwrap().truncated);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig { temperature: -1.0, ..config(0) };
        assert!(Gateway::empty().with_backend(cfg, flaky(0)).is_err());
        let cfg = ModelConfig { max_output_tokens: 0, ..config(0) };
        assert!(Gateway::empty().with_backend(cfg, flaky(0)).is_err());
    }
}
