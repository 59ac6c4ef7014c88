//! A deterministic engine that replays predefined completions.
//!
//! Scripted engines drive tests and demos without a model: each prediction
//! pops the next step of the script, optionally asserting on the prompt it
//! received, and every received (messages, functions) pair is recorded for
//! later inspection.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatMessage, FunctionCall};
use crate::engine::{Completion, Engine, EngineError, HyperParams};
use crate::functions::AIFunction;

/// Assertion run against the (messages, functions) a step received; panics
/// on mismatch so scripted scenarios fail loudly at the exact step.
pub type PromptCheck = Arc<dyn Fn(&[ChatMessage], &[AIFunction]) + Send + Sync>;

/// What a step replies with. This is also the on-disk step schema for script
/// files: a JSON array of `{"say": "..."}` and
/// `{"call": {"name": "...", "arguments": "..."}}` objects.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepReply {
    /// A plain assistant reply.
    Say(String),
    /// An assistant reply requesting a function invocation.
    Call { name: String, arguments: String },
}

/// One scripted step: a reply plus an optional prompt assertion.
#[derive(Clone)]
pub struct ScriptStep {
    reply: StepReply,
    check: Option<PromptCheck>,
}

/// An ordered list of steps, consumed front to back.
#[derive(Default, Clone)]
pub struct Script {
    steps: Vec<ScriptStep>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a plain text reply.
    pub fn say(mut self, text: impl Into<String>) -> Self {
        self.steps.push(ScriptStep {
            reply: StepReply::Say(text.into()),
            check: None,
        });
        self
    }

    /// Appends a function-call reply.
    pub fn call(mut self, name: impl Into<String>, arguments: impl Into<String>) -> Self {
        self.steps.push(ScriptStep {
            reply: StepReply::Call {
                name: name.into(),
                arguments: arguments.into(),
            },
            check: None,
        });
        self
    }

    /// Attaches a prompt assertion to the most recently added step.
    pub fn check_prompt<F>(mut self, check: F) -> Self
    where
        F: Fn(&[ChatMessage], &[AIFunction]) + Send + Sync + 'static,
    {
        let step = self
            .steps
            .last_mut()
            .expect("check_prompt needs a step to attach to");
        step.check = Some(Arc::new(check));
        self
    }

    /// Parses a script file: a JSON array of step replies.
    pub fn from_json(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        let replies: Vec<StepReply> = serde_json::from_slice(bytes)?;
        Ok(Self {
            steps: replies
                .into_iter()
                .map(|reply| ScriptStep { reply, check: None })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One prediction as the engine received it.
#[derive(Debug, Clone)]
pub struct RecordedCall {
    pub messages: Vec<ChatMessage>,
    /// Names of the functions exposed on this prediction.
    pub functions: Vec<String>,
}

/// Token accounting used by the scripted engine: whitespace-separated words
/// plus one token of per-message overhead.
pub fn scripted_message_len(message: &ChatMessage) -> usize {
    message.content().split_whitespace().count() + 1
}

/// Tokens the scripted engine reserves per exposed function.
pub const RESERVE_PER_FUNCTION: usize = 8;

/// The scripted engine. Safe to share between concurrent agents in tests;
/// the step queue is internally synchronized.
pub struct ScriptedEngine {
    steps: Mutex<VecDeque<ScriptStep>>,
    recorded: Mutex<Vec<RecordedCall>>,
    max_context_size: usize,
    closed: AtomicBool,
}

impl ScriptedEngine {
    pub fn new(script: Script) -> Self {
        Self {
            steps: Mutex::new(script.steps.into()),
            recorded: Mutex::new(Vec::new()),
            max_context_size: 4096,
            closed: AtomicBool::new(false),
        }
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.max_context_size = tokens;
        self
    }

    /// Every (messages, functions) pair received so far, in order.
    pub fn recorded_calls(&self) -> Vec<RecordedCall> {
        self.recorded.lock().unwrap().clone()
    }

    pub fn remaining_steps(&self) -> usize {
        self.steps.lock().unwrap().len()
    }
}

#[async_trait]
impl Engine for ScriptedEngine {
    fn max_context_size(&self) -> usize {
        self.max_context_size
    }

    fn message_len(&self, message: &ChatMessage) -> usize {
        scripted_message_len(message)
    }

    fn function_token_reserve(&self, functions: &[AIFunction]) -> usize {
        functions.len() * RESERVE_PER_FUNCTION
    }

    async fn predict(
        &self,
        messages: &[ChatMessage],
        functions: &[AIFunction],
        _hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(EngineError::Closed);
        }
        let step = {
            let mut steps = self.steps.lock().unwrap();
            steps.pop_front()
        };
        let Some(step) = step else {
            return Err(EngineError::ScriptExhausted(format!(
                "no step left for prediction #{}",
                self.recorded.lock().unwrap().len() + 1
            )));
        };
        self.recorded.lock().unwrap().push(RecordedCall {
            messages: messages.to_vec(),
            functions: functions.iter().map(|f| f.name().to_string()).collect(),
        });
        if let Some(check) = &step.check {
            check(messages, functions);
        }
        let message = match step.reply {
            StepReply::Say(text) => ChatMessage::assistant(text),
            StepReply::Call { name, arguments } => {
                let call = FunctionCall::new(name, arguments)
                    .map_err(|e| EngineError::Protocol(e.to_string()))?;
                ChatMessage::assistant_with_call("", call)
            }
        };
        let prompt_tokens = messages.iter().map(scripted_message_len).sum();
        let completion_tokens = scripted_message_len(&message);
        Ok(Completion::new(message, prompt_tokens, completion_tokens))
    }

    async fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}
