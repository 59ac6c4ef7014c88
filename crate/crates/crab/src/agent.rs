//! The conversation orchestrator.
//!
//! An [`Agent`] binds one engine, one chat history, and one function registry
//! into a single conversation. It assembles token-budgeted prompts, runs chat
//! rounds and full rounds with function execution, feeds errors back to the
//! model for retry, and exposes the hook points ([`AgentHooks`]) that let
//! applications replace the prompt builder, instrument function calls, or
//! customize error handling.
//!
//! One agent is one conversation: rounds borrow the agent mutably, so they
//! are strictly sequential by construction. Distinct agents may run rounds
//! concurrently against a shared engine.

use std::io::{Read, Write};
use std::sync::Arc;

use async_trait::async_trait;

use crate::chat::{
    load_transcript, save_transcript, ChatError, ChatMessage, ChatRole, FunctionCall,
};
use crate::engine::{Completion, Engine, EngineError, HyperParams};
use crate::functions::{CallError, CallErrorKind, FunctionRegistry};

/// Construction-time settings for an agent.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// High-level instructions, materialized as the first always-included
    /// system message.
    pub system_prompt: Option<String>,
    /// Messages pinned at the top of every prompt; never truncated out.
    pub always_included_messages: Vec<ChatMessage>,
    /// How many consecutive failed function calls the default error handler
    /// lets the model retry before hiding functions for the rest of the
    /// round.
    pub retry_attempts: u32,
    /// Tokens kept free for the model's reply when windowing history.
    pub desired_response_tokens: usize,
    /// Hard bound on function executions in one full round; guarantees
    /// termination even against a model that keeps calling functions.
    pub max_function_rounds: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            system_prompt: None,
            always_included_messages: Vec::new(),
            retry_attempts: 1,
            desired_response_tokens: 450,
            max_function_rounds: 10,
        }
    }
}

/// Errors surfaced by agent rounds.
#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    /// The always-included messages plus reserves do not fit the context
    /// window on their own; no amount of history eviction can help.
    #[error("prompt reserves need {required} tokens but the context holds {available}")]
    ContextOverflow { required: usize, available: usize },
    #[error("invalid agent configuration: {0}")]
    InvalidConfig(String),
}

/// One observable step of a full round.
#[derive(Debug, Clone, PartialEq)]
pub enum RoundEvent {
    /// The model produced an intermediate message carrying a function call.
    AssistantMessage(ChatMessage),
    /// A function produced output (or spoke its own failure).
    FunctionResult(ChatMessage),
    /// The textual reply that ends the round.
    FinalMessage(ChatMessage),
}

impl RoundEvent {
    /// The message this event carries, regardless of variant.
    pub fn message(&self) -> &ChatMessage {
        match self {
            RoundEvent::AssistantMessage(m)
            | RoundEvent::FunctionResult(m)
            | RoundEvent::FinalMessage(m) => m,
        }
    }
}

/// Completion token counts recorded across rounds, for diagnostics only;
/// windowing always uses `Engine::message_len`.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct TokenUsage {
    pub last_prompt_tokens: usize,
    pub last_completion_tokens: usize,
    pub total_prompt_tokens: u64,
    pub total_completion_tokens: u64,
}

/// Everything an agent owns except its hooks. Hook implementations receive
/// this so they can read or extend the conversation while the hook object
/// itself stays mutable for its own bookkeeping.
pub struct AgentState {
    engine: Arc<dyn Engine>,
    config: AgentConfig,
    persistent: Vec<ChatMessage>,
    history: Vec<ChatMessage>,
    registry: FunctionRegistry,
    usage: TokenUsage,
}

impl AgentState {
    pub fn engine(&self) -> &Arc<dyn Engine> {
        &self.engine
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    /// The system prompt (if any) followed by the always-included messages.
    pub fn persistent_messages(&self) -> &[ChatMessage] {
        &self.persistent
    }

    pub fn history(&self) -> &[ChatMessage] {
        &self.history
    }

    pub fn registry(&self) -> &FunctionRegistry {
        &self.registry
    }

    pub fn usage(&self) -> TokenUsage {
        self.usage
    }

    /// Appends a message to the conversation history. History grows
    /// append-only during rounds; replacing it wholesale goes through
    /// transcript loading.
    pub fn append_history(&mut self, message: ChatMessage) {
        self.history.push(message);
    }

    /// The default prompt: persistent messages followed by the longest
    /// history suffix whose token lengths fit the remaining budget. Whole
    /// messages only; a message exactly equal to the remaining budget is
    /// included.
    pub fn default_prompt(&self) -> Result<Vec<ChatMessage>, AgentError> {
        let functions = self.registry.functions();
        let reserve = self.engine.function_token_reserve(&functions);
        let persistent_len: usize = self
            .persistent
            .iter()
            .map(|m| self.engine.message_len(m))
            .sum();
        let max = self.engine.max_context_size();
        let fixed = persistent_len + reserve + self.config.desired_response_tokens;
        if fixed > max {
            return Err(AgentError::ContextOverflow {
                required: fixed,
                available: max,
            });
        }
        let mut budget = max - fixed;
        let mut start = self.history.len();
        for (i, message) in self.history.iter().enumerate().rev() {
            let len = self.engine.message_len(message);
            if len > budget {
                break;
            }
            budget -= len;
            start = i;
        }
        Ok(self
            .persistent
            .iter()
            .chain(&self.history[start..])
            .cloned()
            .collect())
    }

    /// The default function executor: validates and runs the call through
    /// the registry, wrapping the result in a function message.
    pub async fn execute_call(&self, call: &FunctionCall) -> Result<ChatMessage, CallError> {
        let result = self.registry.invoke(call).await?;
        Ok(ChatMessage::function(call.name(), result))
    }

    /// The default feedback: appends the error to history so the model can
    /// correct itself. A failure inside the function speaks as the function;
    /// framework-level failures (bad name, bad arguments) speak as system
    /// guidance.
    pub fn append_error_feedback(&mut self, call: &FunctionCall, err: &CallError) {
        let message = match err.kind {
            CallErrorKind::WrappedCall => ChatMessage::function(call.name(), err.detail.clone()),
            _ => ChatMessage::system(format!(
                "Function call failed: {}. Correct the call or answer without it.",
                err.detail
            )),
        };
        self.history.push(message);
    }

    fn record_usage(&mut self, completion: &Completion) {
        self.usage.last_prompt_tokens = completion.prompt_tokens();
        self.usage.last_completion_tokens = completion.completion_tokens();
        self.usage.total_prompt_tokens += completion.prompt_tokens() as u64;
        self.usage.total_completion_tokens += completion.completion_tokens() as u64;
    }
}

/// Override points for agent behavior. Every method has a default that
/// delegates to the corresponding [`AgentState`] operation, so implementors
/// override only what they need.
#[async_trait]
pub trait AgentHooks: Send {
    /// Assembles the prompt for the next prediction.
    async fn build_prompt(&mut self, state: &AgentState) -> Result<Vec<ChatMessage>, AgentError> {
        state.default_prompt()
    }

    /// Executes one requested function call, returning the function message
    /// to append on success. Failures propagate to
    /// [`AgentHooks::handle_function_call_exception`].
    async fn do_function_call(
        &mut self,
        state: &mut AgentState,
        call: &FunctionCall,
    ) -> Result<ChatMessage, CallError> {
        state.execute_call(call).await
    }

    /// Reacts to a failed function call and decides whether the model may
    /// retry. `attempt` counts consecutive failures in this round, starting
    /// at zero.
    async fn handle_function_call_exception(
        &mut self,
        state: &mut AgentState,
        call: &FunctionCall,
        err: &CallError,
        attempt: u32,
    ) -> bool {
        state.append_error_feedback(call, err);
        attempt < state.config.retry_attempts
    }
}

/// Hooks that do exactly the default behavior.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultHooks;

impl AgentHooks for DefaultHooks {}

/// The conversation orchestrator. See the module docs for the overall
/// model; construct one per conversation.
pub struct Agent<H: AgentHooks = DefaultHooks> {
    state: AgentState,
    hooks: H,
}

impl Agent<DefaultHooks> {
    /// An agent with default behavior and no callable functions.
    pub fn new(engine: Arc<dyn Engine>, config: AgentConfig) -> Result<Self, AgentError> {
        Self::with_hooks(engine, config, FunctionRegistry::new(), DefaultHooks)
    }

    /// An agent with default behavior and the given functions.
    pub fn with_functions(
        engine: Arc<dyn Engine>,
        config: AgentConfig,
        registry: FunctionRegistry,
    ) -> Result<Self, AgentError> {
        Self::with_hooks(engine, config, registry, DefaultHooks)
    }
}

impl<H: AgentHooks> Agent<H> {
    /// An agent with custom hooks.
    pub fn with_hooks(
        engine: Arc<dyn Engine>,
        config: AgentConfig,
        registry: FunctionRegistry,
        hooks: H,
    ) -> Result<Self, AgentError> {
        if config.desired_response_tokens >= engine.max_context_size() {
            return Err(AgentError::InvalidConfig(format!(
                "desired_response_tokens ({}) must be below the engine context size ({})",
                config.desired_response_tokens,
                engine.max_context_size()
            )));
        }
        let mut persistent = Vec::with_capacity(config.always_included_messages.len() + 1);
        if let Some(system) = &config.system_prompt {
            persistent.push(ChatMessage::system(system.clone()));
        }
        persistent.extend(config.always_included_messages.iter().cloned());
        Ok(Self {
            state: AgentState {
                engine,
                config,
                persistent,
                history: Vec::new(),
                registry,
                usage: TokenUsage::default(),
            },
            hooks,
        })
    }

    pub fn state(&self) -> &AgentState {
        &self.state
    }

    pub fn hooks(&self) -> &H {
        &self.hooks
    }

    pub fn hooks_mut(&mut self) -> &mut H {
        &mut self.hooks
    }

    pub fn history(&self) -> &[ChatMessage] {
        &self.state.history
    }

    pub fn usage(&self) -> TokenUsage {
        self.state.usage
    }

    /// Runs one text-only turn: appends the user message, predicts with no
    /// functions exposed, appends and returns the assistant reply.
    ///
    /// On error the round is atomic: the failed user append is rolled back
    /// and history is unchanged.
    pub async fn chat_round(&mut self, user_text: &str) -> Result<ChatMessage, AgentError> {
        let checkpoint = self.state.history.len();
        let result = self.chat_round_inner(user_text).await;
        if result.is_err() {
            self.state.history.truncate(checkpoint);
        }
        result
    }

    async fn chat_round_inner(&mut self, user_text: &str) -> Result<ChatMessage, AgentError> {
        self.state.history.push(ChatMessage::user(user_text));
        let prompt = self.hooks.build_prompt(&self.state).await?;
        let completion = self
            .state
            .engine
            .predict(&prompt, &[], &HyperParams::new())
            .await?;
        self.state.record_usage(&completion);
        let message = completion.into_message();
        self.state.history.push(message.clone());
        Ok(message)
    }

    /// Runs one full turn with function calling: the model may request any
    /// number of function executions (bounded by
    /// [`AgentConfig::max_function_rounds`]) before its final textual reply.
    ///
    /// Returns the round's event trace; use [`Agent::full_round_with`] to
    /// observe events as they happen. On error all messages appended during
    /// the round are rolled back.
    pub async fn full_round(&mut self, user_text: &str) -> Result<Vec<RoundEvent>, AgentError> {
        self.full_round_with(user_text, |_| {}).await
    }

    /// [`Agent::full_round`], invoking `on_event` as each event is emitted
    /// so callers can render progress during long function calls.
    pub async fn full_round_with<F>(
        &mut self,
        user_text: &str,
        mut on_event: F,
    ) -> Result<Vec<RoundEvent>, AgentError>
    where
        F: FnMut(&RoundEvent) + Send,
    {
        let checkpoint = self.state.history.len();
        let mut events = Vec::new();
        let mut emit = |event: RoundEvent| {
            on_event(&event);
            events.push(event);
        };
        let result = self.run_full_round(user_text, &mut emit).await;
        match result {
            Ok(()) => Ok(events),
            Err(err) => {
                self.state.history.truncate(checkpoint);
                Err(err)
            }
        }
    }

    async fn run_full_round(
        &mut self,
        user_text: &str,
        emit: &mut (dyn FnMut(RoundEvent) + Send),
    ) -> Result<(), AgentError> {
        self.state.history.push(ChatMessage::user(user_text));
        let mut functions_visible = true;
        let mut attempt: u32 = 0;
        for _ in 0..self.state.config.max_function_rounds {
            let functions = if functions_visible {
                self.state.registry.functions()
            } else {
                Vec::new()
            };
            let prompt = self.hooks.build_prompt(&self.state).await?;
            let completion = self
                .state
                .engine
                .predict(&prompt, &functions, &HyperParams::new())
                .await?;
            self.state.record_usage(&completion);
            let message = completion.into_message();
            self.state.history.push(message.clone());
            let Some(call) = message.function_call().cloned() else {
                emit(RoundEvent::FinalMessage(message));
                return Ok(());
            };
            emit(RoundEvent::AssistantMessage(message));
            match self.hooks.do_function_call(&mut self.state, &call).await {
                Ok(result_message) => {
                    self.state.history.push(result_message.clone());
                    emit(RoundEvent::FunctionResult(result_message));
                    attempt = 0;
                }
                Err(err) => {
                    let before = self.state.history.len();
                    let retry = self
                        .hooks
                        .handle_function_call_exception(&mut self.state, &call, &err, attempt)
                        .await;
                    attempt += 1;
                    // Feedback the handler spoke in the function's voice is
                    // part of the observable trace; system guidance is not.
                    let appended = self.state.history[before..].to_vec();
                    for message in appended {
                        if message.role() == ChatRole::Function {
                            emit(RoundEvent::FunctionResult(message));
                        }
                    }
                    if !retry {
                        functions_visible = false;
                    }
                }
            }
        }
        // Function budget exhausted: force a textual reply by hiding the
        // functions entirely.
        let prompt = self.hooks.build_prompt(&self.state).await?;
        let completion = self
            .state
            .engine
            .predict(&prompt, &[], &HyperParams::new())
            .await?;
        self.state.record_usage(&completion);
        let message = completion.into_message();
        self.state.history.push(message.clone());
        emit(RoundEvent::FinalMessage(message));
        Ok(())
    }

    /// Spawns an independent agent for a delegated task: its own engine, a
    /// copy of whatever history slice the caller chooses, and nothing shared
    /// with the parent. The child starts with no functions and no persistent
    /// messages; build an agent directly for more control.
    pub fn spawn_subagent(
        &self,
        engine: Arc<dyn Engine>,
        history: Vec<ChatMessage>,
    ) -> Agent<DefaultHooks> {
        let parent = &self.state.config;
        let config = AgentConfig {
            system_prompt: None,
            always_included_messages: Vec::new(),
            retry_attempts: parent.retry_attempts,
            // Capped so the child stays valid on engines with smaller
            // windows than the parent's.
            desired_response_tokens: parent
                .desired_response_tokens
                .min(engine.max_context_size().saturating_sub(1)),
            max_function_rounds: parent.max_function_rounds,
        };
        let mut child = Agent::new(engine, config).expect("capped sub-agent config is valid");
        child.state.history = history;
        child
    }

    /// Saves the conversation history as a transcript.
    pub fn save<W: Write>(&self, sink: W) -> Result<(), ChatError> {
        save_transcript(&self.state.history, sink)
    }

    /// Replaces the conversation history wholesale with a saved transcript.
    pub fn load<R: Read>(&mut self, source: R) -> Result<(), ChatError> {
        self.state.history = load_transcript(source)?;
        Ok(())
    }
}
