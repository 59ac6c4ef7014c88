//! Helpers shared across the integration test targets.
#![allow(dead_code)]

use std::sync::Arc;

use async_trait::async_trait;
use serde_json::Value;

use crab::{
    AIFunction, Agent, AgentHooks, ChatMessage, Completion, Engine, EngineError, FunctionRegistry,
    HyperParams, ParamSpec, ParamType,
};

pub const WEATHER_ARGS: &str = r#"{"loc":"San Francisco","unit":"fahrenheit"}"#;

pub fn weather_function() -> AIFunction {
    AIFunction::new(
        "get_weather",
        "Get the weather in a given location.",
        vec![
            ParamSpec::new("loc", ParamType::String).describe("The desired city"),
            ParamSpec::new(
                "unit",
                ParamType::Enum(vec!["fahrenheit".into(), "celsius".into()]),
            ),
        ],
        |args| async move {
            let _ = args;
            Ok(Value::String("72F".into()))
        },
    )
    .unwrap()
}

pub fn weather_registry() -> FunctionRegistry {
    FunctionRegistry::from_functions([weather_function()])
}

/// Engine whose message lengths are the numbers written in message content;
/// lets windowing tests pick token lengths directly.
pub struct MeterEngine {
    pub max: usize,
    pub reserve: usize,
}

#[async_trait]
impl Engine for MeterEngine {
    fn max_context_size(&self) -> usize {
        self.max
    }

    fn message_len(&self, message: &ChatMessage) -> usize {
        message
            .content()
            .parse()
            .expect("meter messages hold their token length")
    }

    fn function_token_reserve(&self, _functions: &[AIFunction]) -> usize {
        self.reserve
    }

    async fn predict(
        &self,
        _messages: &[ChatMessage],
        _functions: &[AIFunction],
        _hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError> {
        Err(EngineError::Protocol("meter engine never predicts".into()))
    }
}

/// Wrapper that asserts the budget inequality on every prediction it sees.
pub struct BudgetCheckEngine<E> {
    pub inner: E,
    pub desired_response_tokens: usize,
}

#[async_trait]
impl<E: Engine> Engine for BudgetCheckEngine<E> {
    fn max_context_size(&self) -> usize {
        self.inner.max_context_size()
    }

    fn message_len(&self, message: &ChatMessage) -> usize {
        self.inner.message_len(message)
    }

    fn function_token_reserve(&self, functions: &[AIFunction]) -> usize {
        self.inner.function_token_reserve(functions)
    }

    async fn predict(
        &self,
        messages: &[ChatMessage],
        functions: &[AIFunction],
        hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError> {
        let prompt_len: usize = messages.iter().map(|m| self.inner.message_len(m)).sum();
        let reserve = self.inner.function_token_reserve(functions);
        assert!(
            prompt_len + reserve + self.desired_response_tokens <= self.inner.max_context_size(),
            "budget violated: {prompt_len} + {reserve} + {} > {}",
            self.desired_response_tokens,
            self.inner.max_context_size()
        );
        self.inner.predict(messages, functions, hyperparams).await
    }
}

pub fn meter_messages(lens: &[usize]) -> Vec<ChatMessage> {
    lens.iter().map(|n| ChatMessage::user(n.to_string())).collect()
}

/// Independent oracle: index where the longest history suffix fitting the
/// budget begins.
pub fn brute_force_suffix(lens: &[usize], budget: usize) -> usize {
    for start in 0..=lens.len() {
        if lens[start..].iter().sum::<usize>() <= budget {
            return start;
        }
    }
    lens.len()
}

/// Replaces an agent's history via the transcript path (history is only
/// otherwise extended by rounds).
pub fn load_history<H: AgentHooks>(agent: &mut Agent<H>, messages: &[ChatMessage]) {
    let mut buf = Vec::new();
    crab::save_transcript(messages, &mut buf).unwrap();
    agent.load(&buf[..]).unwrap();
}

pub fn shared<E: Engine + 'static>(engine: E) -> Arc<dyn Engine> {
    Arc::new(engine)
}
