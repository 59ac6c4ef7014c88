//! Engine for OpenAI-compatible chat-completions HTTP APIs.
//!
//! Speaks the public chat-completions convention: messages go out as
//! `{role, content, name?, function_call?}` objects, function schemas ride in
//! a `functions` array, and the reply's `function_call` comes back verbatim
//! with its arguments kept as raw text. Rate limits and server errors are
//! retried with jittered exponential backoff; the API key never appears in
//! error text.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

use async_trait::async_trait;

use crate::chat::{ChatMessage, ChatRole, FunctionCall};
use crate::engine::{Completion, Engine, EngineError, HyperParams};
use crate::functions::AIFunction;

/// Estimator for message token lengths when the provider's tokenizer is not
/// available locally.
pub type LenEstimator = std::sync::Arc<dyn Fn(&ChatMessage) -> usize + Send + Sync>;

/// Connection settings for an OpenAI-compatible endpoint.
#[derive(Clone)]
pub struct HttpEngineConfig {
    /// Endpoint root; requests go to `{base_url}/chat/completions`.
    pub base_url: String,
    /// Bearer token. Redacted from every error this engine produces.
    pub api_key: String,
    /// Model identifier, e.g. "gpt-4".
    pub model: String,
    /// Context window used for budgeting, in tokens.
    pub max_context_size: usize,
    /// Defaults merged under per-call hyperparameters.
    pub default_hyperparams: HyperParams,
    pub request_timeout: Duration,
    /// Extra attempts after the first on 429/5xx responses.
    pub max_retries_transport: u32,
    /// Base delay for exponential backoff between retries.
    pub retry_base_delay: Duration,
}

impl HttpEngineConfig {
    pub fn new(
        base_url: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
            max_context_size: 8192,
            default_hyperparams: HyperParams::new(),
            request_timeout: Duration::from_secs(30),
            max_retries_transport: 2,
            retry_base_delay: Duration::from_millis(250),
        }
    }
}

/// Message as it appears on the wire; absent optionals are omitted rather
/// than null, per the public convention.
#[derive(Serialize)]
struct WireMessage<'a> {
    role: ChatRole,
    content: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    name: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    function_call: Option<&'a FunctionCall>,
}

impl<'a> From<&'a ChatMessage> for WireMessage<'a> {
    fn from(m: &'a ChatMessage) -> Self {
        Self {
            role: m.role(),
            content: m.content(),
            name: m.name(),
            function_call: m.function_call(),
        }
    }
}

/// Builds the request body sent to `/chat/completions`.
///
/// Hyperparameters (engine defaults overlaid with per-call values) merge
/// into the top level; the reserved `model`, `messages`, and `functions`
/// keys always win.
pub fn build_request_body(
    model: &str,
    messages: &[ChatMessage],
    functions: &[AIFunction],
    defaults: &HyperParams,
    per_call: &HyperParams,
) -> serde_json::Value {
    let mut body = serde_json::Map::new();
    for (key, value) in defaults.iter().chain(per_call) {
        body.insert(key.clone(), value.clone());
    }
    body.insert("model".into(), serde_json::json!(model));
    let wire: Vec<WireMessage> = messages.iter().map(WireMessage::from).collect();
    body.insert(
        "messages".into(),
        serde_json::to_value(wire).expect("messages serialize"),
    );
    if !functions.is_empty() {
        let schemas: Vec<serde_json::Value> = functions.iter().map(|f| f.schema()).collect();
        body.insert("functions".into(), serde_json::Value::Array(schemas));
    }
    serde_json::Value::Object(body)
}

#[derive(Deserialize)]
struct ApiResponse {
    choices: Vec<ApiChoice>,
    #[serde(default)]
    usage: Option<ApiUsage>,
}

#[derive(Deserialize)]
struct ApiChoice {
    message: ApiMessage,
}

#[derive(Deserialize)]
struct ApiMessage {
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    function_call: Option<ApiFunctionCall>,
}

#[derive(Deserialize)]
struct ApiFunctionCall {
    name: String,
    arguments: String,
}

#[derive(Deserialize, Default)]
struct ApiUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

/// Parses a chat-completions response body into a [`Completion`].
///
/// Total over untrusted bytes: any shape that is not a well-formed response
/// with an assistant choice becomes [`EngineError::Protocol`].
pub fn parse_chat_completion(body: &[u8]) -> Result<Completion, EngineError> {
    let response: ApiResponse = serde_json::from_slice(body)
        .map_err(|e| EngineError::Protocol(format!("unparseable response body: {e}")))?;
    let choice = response
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| EngineError::Protocol("response contained no choices".into()))?;
    if let Some(role) = &choice.message.role {
        if role != "assistant" {
            return Err(EngineError::Protocol(format!(
                "expected an assistant message, got role '{role}'"
            )));
        }
    }
    let content = choice.message.content.unwrap_or_default();
    let message = match choice.message.function_call {
        Some(call) => {
            let call = FunctionCall::new(call.name, call.arguments)
                .map_err(|e| EngineError::Protocol(e.to_string()))?;
            ChatMessage::assistant_with_call(content, call)
        }
        None => ChatMessage::assistant(content),
    };
    let usage = response.usage.unwrap_or_default();
    Ok(Completion::new(
        message,
        usage.prompt_tokens,
        usage.completion_tokens,
    ))
}

/// Characters charged to a message by the default length estimator: content
/// plus any name and function-call payload.
fn estimated_chars(message: &ChatMessage) -> usize {
    let mut chars = message.content().chars().count();
    if let Some(name) = message.name() {
        chars += name.chars().count();
    }
    if let Some(call) = message.function_call() {
        chars += call.name().chars().count() + call.arguments().chars().count();
    }
    chars
}

/// Default token estimate: one token per four characters, rounded up, plus
/// five tokens of per-message overhead.
pub fn default_message_len(message: &ChatMessage) -> usize {
    estimated_chars(message).div_ceil(4) + 5
}

/// HTTP chat-completions engine. Prediction calls run concurrently over a
/// shared connection pool.
pub struct HttpEngine {
    config: HttpEngineConfig,
    client: reqwest::Client,
    estimator: Option<LenEstimator>,
    closed: AtomicBool,
}

impl HttpEngine {
    pub fn new(config: HttpEngineConfig) -> Result<Self, EngineError> {
        let client = reqwest::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| EngineError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            estimator: None,
            closed: AtomicBool::new(false),
        })
    }

    /// Replaces the default length estimator, e.g. with an exact provider
    /// tokenizer.
    pub fn with_len_estimator(mut self, estimator: LenEstimator) -> Self {
        self.estimator = Some(estimator);
        self
    }

    fn redact(&self, text: String) -> String {
        if self.config.api_key.is_empty() {
            return text;
        }
        text.replace(&self.config.api_key, "[redacted]")
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

/// Statuses worth retrying: rate limits and server-side failures.
fn retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

/// Exponential backoff with up to 50% added jitter, capped at ten seconds.
fn backoff_delay(base: Duration, attempt: u32, jitter: f64) -> Duration {
    let exp = base.saturating_mul(2u32.saturating_pow(attempt));
    let jittered = exp.mul_f64(1.0 + jitter * 0.5);
    jittered.min(Duration::from_secs(10))
}

#[async_trait]
impl Engine for HttpEngine {
    fn max_context_size(&self) -> usize {
        self.config.max_context_size
    }

    fn message_len(&self, message: &ChatMessage) -> usize {
        match &self.estimator {
            Some(estimator) => estimator(message),
            None => default_message_len(message),
        }
    }

    fn function_token_reserve(&self, functions: &[AIFunction]) -> usize {
        functions
            .iter()
            .map(|f| f.schema_json().chars().count().div_ceil(4))
            .sum()
    }

    async fn predict(
        &self,
        messages: &[ChatMessage],
        functions: &[AIFunction],
        hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(EngineError::Closed);
        }
        let body = build_request_body(
            &self.config.model,
            messages,
            functions,
            &self.config.default_hyperparams,
            hyperparams,
        );
        let mut attempt = 0u32;
        loop {
            let response = self
                .client
                .post(self.endpoint())
                .bearer_auth(&self.config.api_key)
                .json(&body)
                .send()
                .await
                .map_err(|e| EngineError::Transport(self.redact(e.to_string())))?;
            let status = response.status().as_u16();
            let bytes = response
                .bytes()
                .await
                .map_err(|e| EngineError::Transport(self.redact(e.to_string())))?;
            if (200..300).contains(&status) {
                return parse_chat_completion(&bytes);
            }
            if retryable_status(status) && attempt < self.config.max_retries_transport {
                let jitter = rand::rng().random_range(0.0..1.0);
                tokio::time::sleep(backoff_delay(self.config.retry_base_delay, attempt, jitter))
                    .await;
                attempt += 1;
                continue;
            }
            let snippet: String = String::from_utf8_lossy(&bytes).chars().take(200).collect();
            return Err(EngineError::Transport(self.redact(format!(
                "HTTP {status} after {} attempt(s): {snippet}",
                attempt + 1
            ))));
        }
    }

    async fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}
