//! A model-agnostic framework for building chat-based language model
//! applications.
//!
//! The framework does three things and keeps them overridable:
//!
//! 1. **Interfaces with models** behind the [`Engine`] contract, so swapping
//!    backends never touches application code.
//! 2. **Manages chat history** under a token budget: prompts always fit the
//!    engine's context window, with pinned messages never truncated out.
//! 3. **Exposes and calls functions** robustly: arguments are validated
//!    against declared types before handlers run, and failures feed back to
//!    the model so it can retry.
//!
//! The entry point is the [`Agent`]: give it an engine, optionally a
//! [`FunctionRegistry`], and drive the conversation with
//! [`Agent::chat_round`] (text only) or [`Agent::full_round`] (function
//! calling).
//!
//! ```
//! use std::sync::Arc;
//! use crab::engines::scripted::{Script, ScriptedEngine};
//! use crab::{Agent, AgentConfig};
//!
//! # async fn demo() -> Result<(), crab::AgentError> {
//! let engine = Arc::new(ScriptedEngine::new(Script::new().say("Hello! How can I help?")));
//! let mut agent = Agent::new(engine, AgentConfig::default())?;
//! let reply = agent.chat_round("Hello!").await?;
//! assert_eq!(reply.content(), "Hello! How can I help?");
//! # Ok(())
//! # }
//! ```

pub mod agent;
pub mod chat;
pub mod engine;
pub mod engines;
pub mod functions;

pub use agent::{
    Agent, AgentConfig, AgentError, AgentHooks, AgentState, DefaultHooks, RoundEvent, TokenUsage,
};
pub use chat::{
    load_transcript, save_transcript, ChatError, ChatMessage, ChatRole, FunctionCall, Transcript,
    TRANSCRIPT_VERSION,
};
pub use engine::{Completion, Engine, EngineError, HyperParams};
pub use functions::{
    AIFunction, ArgMap, CallError, CallErrorKind, FunctionDefError, FunctionRegistry, ParamSpec,
    ParamType,
};
