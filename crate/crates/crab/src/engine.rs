//! The uniform contract every inference backend implements.
//!
//! This trait is the seam that makes the rest of the framework
//! model-agnostic: agents only ever talk to an [`Engine`], so swapping
//! backends never touches application code.

use async_trait::async_trait;

use crate::chat::{ChatMessage, ChatRole};
use crate::functions::AIFunction;

/// Per-call generation settings. Engines merge these over their own defaults
/// with per-call keys winning.
pub type HyperParams = serde_json::Map<String, serde_json::Value>;

/// Failures surfaced by engines. Provider detail is carried as text.
#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    /// The engine was closed; no further predictions are possible.
    #[error("engine is closed")]
    Closed,
    /// The transport failed (connection, timeout, non-success status).
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend replied with something that could not be understood.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// A scripted engine ran out of steps; in tests this means the scenario
    /// asked for more predictions than the script provides.
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
}

/// An engine's reply to one prediction request: the assistant message plus
/// its token accounting.
#[derive(Debug, Clone)]
pub struct Completion {
    message: ChatMessage,
    prompt_tokens: usize,
    completion_tokens: usize,
}

impl Completion {
    /// Wraps an assistant message with its token counts.
    ///
    /// Panics if the message role is not assistant; engines own that
    /// invariant and a violation is a bug in the engine implementation.
    pub fn new(message: ChatMessage, prompt_tokens: usize, completion_tokens: usize) -> Self {
        assert_eq!(
            message.role(),
            ChatRole::Assistant,
            "completions carry assistant messages"
        );
        Self {
            message,
            prompt_tokens,
            completion_tokens,
        }
    }

    pub fn message(&self) -> &ChatMessage {
        &self.message
    }

    pub fn into_message(self) -> ChatMessage {
        self.message
    }

    pub fn prompt_tokens(&self) -> usize {
        self.prompt_tokens
    }

    pub fn completion_tokens(&self) -> usize {
        self.completion_tokens
    }
}

/// A chat inference backend.
///
/// Engines are shared: one instance may serve many agents concurrently, so
/// `predict` takes `&self` and implementations must tolerate parallel calls.
/// `close` may race in-flight predictions; those may fail with
/// [`EngineError::Closed`].
#[async_trait]
pub trait Engine: Send + Sync {
    /// The model's maximum context length in tokens. Fixed for the lifetime
    /// of the instance.
    fn max_context_size(&self) -> usize;

    /// The token length of one message, including any per-message wrapper or
    /// delimiter overhead this engine adds when building its wire prompt.
    ///
    /// Agents budget the context window purely in terms of this function, so
    /// it must be deterministic and must not undercount.
    fn message_len(&self, message: &ChatMessage) -> usize;

    /// Produces the next assistant message for the given prompt.
    ///
    /// Fitting `messages` within the context is the caller's responsibility.
    /// If the model wants a tool, the returned message carries a
    /// `function_call`. The input slice is never mutated.
    async fn predict(
        &self,
        messages: &[ChatMessage],
        functions: &[AIFunction],
        hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError>;

    /// Upper bound on prompt tokens consumed by exposing these functions to
    /// the model. Engines that do not splice function schemas into the
    /// prompt can keep the default of zero.
    fn function_token_reserve(&self, functions: &[AIFunction]) -> usize {
        let _ = functions;
        0
    }

    /// Releases connections and handles. Idempotent; predictions after close
    /// fail with [`EngineError::Closed`].
    async fn close(&self) {}
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    #[should_panic(expected = "assistant")]
    fn completion_rejects_non_assistant_message() {
        Completion::new(ChatMessage::user("hi"), 0, 0);
    }

    #[test]
    fn completion_exposes_counts() {
        let c = Completion::new(ChatMessage::assistant("ok"), 12, 3);
        assert_eq!(c.prompt_tokens(), 12);
        assert_eq!(c.completion_tokens(), 3);
        assert_eq!(c.message().content(), "ok");
    }
}
