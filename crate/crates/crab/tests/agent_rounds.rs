//! Agent behavior against scripted engines: prompt windowing, chat and full
//! rounds, the retry/feedback protocol, and the override hooks.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde_json::Value;

use crab::engines::scripted::{Script, ScriptedEngine};
use crab::{
    Agent, AgentConfig, AgentError, AgentHooks, AgentState, AIFunction, CallError, ChatMessage,
    ChatRole, Engine, EngineError, FunctionCall, FunctionRegistry, RoundEvent,
};

mod common;
use common::{
    brute_force_suffix, load_history, meter_messages, weather_registry, BudgetCheckEngine,
    MeterEngine, WEATHER_ARGS,
};

#[tokio::test]
async fn chat_round_appends_user_and_assistant() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("Hello! How can I help?")));
    let mut agent = Agent::new(engine, AgentConfig::default()).unwrap();
    let reply = agent.chat_round("Hello Kani!").await.unwrap();
    assert_eq!(reply.content(), "Hello! How can I help?");
    assert_eq!(agent.history().len(), 2);
    assert_eq!(agent.history()[0], ChatMessage::user("Hello Kani!"));
    assert_eq!(agent.history()[1], reply);
}

#[tokio::test]
async fn chat_round_exposes_no_functions() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("hi")));
    let mut agent =
        Agent::with_functions(engine.clone(), AgentConfig::default(), weather_registry()).unwrap();
    agent.chat_round("hello").await.unwrap();
    assert!(engine.recorded_calls()[0].functions.is_empty());
}

#[tokio::test]
async fn chat_round_rolls_back_on_engine_error() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("never")));
    engine.close().await;
    let mut agent = Agent::new(engine, AgentConfig::default()).unwrap();
    let err = agent.chat_round("hello").await.unwrap_err();
    assert!(matches!(err, AgentError::Engine(EngineError::Closed)));
    assert!(agent.history().is_empty());
}

#[tokio::test]
async fn few_shot_persistent_messages_lead_every_prompt() {
    let shots = vec![
        ChatMessage::user("thank you"),
        ChatMessage::assistant("arigato"),
        ChatMessage::user("good morning"),
        ChatMessage::assistant("ohayo"),
    ];
    let expected = shots.clone();
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("kani").check_prompt(
        move |messages, _| {
            assert_eq!(&messages[..4], &expected[..]);
            assert_eq!(messages[4], ChatMessage::user("crab"));
        },
    )));
    let config = AgentConfig {
        always_included_messages: shots,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(engine, config).unwrap();
    let reply = agent.chat_round("crab").await.unwrap();
    assert_eq!(reply.content(), "kani");
}

#[tokio::test]
async fn system_prompt_is_first_persistent_message() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("ok").check_prompt(
        |messages, _| {
            assert_eq!(messages[0], ChatMessage::system("be helpful"));
        },
    )));
    let config = AgentConfig {
        system_prompt: Some("be helpful".into()),
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(engine, config).unwrap();
    agent.chat_round("hi").await.unwrap();
}

#[tokio::test]
async fn empty_history_prompt_is_exactly_persistent() {
    let engine = Arc::new(MeterEngine { max: 512, reserve: 0 });
    let config = AgentConfig {
        always_included_messages: meter_messages(&[10, 20]),
        desired_response_tokens: 64,
        ..AgentConfig::default()
    };
    let agent = Agent::new(engine, config).unwrap();
    let prompt = agent.state().default_prompt().unwrap();
    assert_eq!(prompt, meter_messages(&[10, 20]));
}

#[tokio::test]
async fn windowing_takes_longest_fitting_suffix() {
    // Budget 60 over history lengths [100, 50, 30, 20]: the brute-force
    // oracle picks the last two (30 + 20 = 50; adding 50 would exceed).
    let lens = [100usize, 50, 30, 20];
    let budget = 60usize;
    assert_eq!(brute_force_suffix(&lens, budget), 2);

    let engine = Arc::new(MeterEngine { max: budget + 64, reserve: 0 });
    let config = AgentConfig {
        desired_response_tokens: 64,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(engine, config).unwrap();
    load_history(&mut agent, &meter_messages(&lens));
    let prompt = agent.state().default_prompt().unwrap();
    assert_eq!(prompt, meter_messages(&[30, 20]));
}

#[tokio::test]
async fn message_equal_to_remaining_budget_is_included() {
    let engine = Arc::new(MeterEngine { max: 100, reserve: 0 });
    let config = AgentConfig {
        desired_response_tokens: 40,
        ..AgentConfig::default()
    };
    let mut agent = Agent::new(engine, config).unwrap();
    load_history(&mut agent, &meter_messages(&[35, 25]));
    // Budget is exactly 60; both messages fit with nothing to spare.
    let prompt = agent.state().default_prompt().unwrap();
    assert_eq!(prompt, meter_messages(&[35, 25]));
}

#[tokio::test]
async fn overflow_when_persistent_alone_cannot_fit() {
    let engine = Arc::new(MeterEngine { max: 100, reserve: 30 });
    let config = AgentConfig {
        always_included_messages: meter_messages(&[50]),
        desired_response_tokens: 40,
        ..AgentConfig::default()
    };
    let agent = Agent::new(engine, config).unwrap();
    let err = agent.state().default_prompt().unwrap_err();
    assert!(matches!(err, AgentError::ContextOverflow { required: 120, available: 100 }));
}

#[tokio::test]
async fn full_round_runs_function_then_final_reply() {
    let engine = Arc::new(ScriptedEngine::new(
        Script::new()
            .call("get_weather", WEATHER_ARGS)
            .say("It's currently 72F in San Francisco."),
    ));
    let mut agent =
        Agent::with_functions(engine.clone(), AgentConfig::default(), weather_registry()).unwrap();
    let events = agent
        .full_round("What's the weather in San Francisco?")
        .await
        .unwrap();

    assert_eq!(events.len(), 3);
    assert!(matches!(&events[0], RoundEvent::AssistantMessage(m)
        if m.function_call().unwrap().name() == "get_weather"));
    assert!(matches!(&events[1], RoundEvent::FunctionResult(m)
        if m.role() == ChatRole::Function && m.name() == Some("get_weather") && m.content() == "72F"));
    assert!(matches!(&events[2], RoundEvent::FinalMessage(m)
        if m.content() == "It's currently 72F in San Francisco."));

    // History is the user message followed by each event's message.
    let mut expected = vec![ChatMessage::user("What's the weather in San Francisco?")];
    expected.extend(events.iter().map(|e| e.message().clone()));
    assert_eq!(agent.history(), &expected[..]);

    // The function list was exposed on the first prediction.
    assert_eq!(engine.recorded_calls()[0].functions, vec!["get_weather"]);
}

#[tokio::test]
async fn hallucinated_name_feeds_back_then_retry_succeeds() {
    // Hand-simulated trace: the bad call yields system feedback (no event),
    // the corrected call executes, and the round ends with text.
    let engine = Arc::new(ScriptedEngine::new(
        Script::new()
            .call("get_wether", "{}")
            .call("get_weather", WEATHER_ARGS)
            .say("It's currently 72F in San Francisco."),
    ));
    let config = AgentConfig {
        retry_attempts: 1,
        ..AgentConfig::default()
    };
    let mut agent = Agent::with_functions(engine, config, weather_registry()).unwrap();
    let events = agent.full_round("weather?").await.unwrap();

    let shapes: Vec<&str> = events
        .iter()
        .map(|e| match e {
            RoundEvent::AssistantMessage(_) => "assistant",
            RoundEvent::FunctionResult(_) => "function",
            RoundEvent::FinalMessage(_) => "final",
        })
        .collect();
    assert_eq!(shapes, ["assistant", "assistant", "function", "final"]);

    // The feedback lives in history as system guidance carrying the detail.
    let feedback = &agent.history()[2];
    assert_eq!(feedback.role(), ChatRole::System);
    assert!(feedback.content().contains("get_wether"));
}

#[tokio::test]
async fn wrapped_failure_speaks_as_the_function() {
    let failing = AIFunction::new("get_time", "Get the current time.", vec![], |_| async {
        Err("The API is offline".to_string())
    })
    .unwrap();
    let engine = Arc::new(ScriptedEngine::new(
        Script::new().call("get_time", "{}").say("no time today"),
    ));
    let mut agent = Agent::with_functions(
        engine,
        AgentConfig::default(),
        FunctionRegistry::from_functions([failing]),
    )
    .unwrap();
    let events = agent.full_round("what time is it?").await.unwrap();

    // The failure is part of the observable trace, in the function's voice.
    assert!(matches!(&events[1], RoundEvent::FunctionResult(m)
        if m.role() == ChatRole::Function
            && m.name() == Some("get_time")
            && m.content().contains("The API is offline")));
    let feedback = &agent.history()[2];
    assert_eq!(feedback.role(), ChatRole::Function);
    assert!(feedback.content().contains("The API is offline"));
}

#[tokio::test]
async fn exhausted_retries_hide_functions_for_the_rest_of_the_round() {
    let engine = Arc::new(ScriptedEngine::new(
        Script::new()
            .call("get_wether", "{}")
            .call("get_weather", WEATHER_ARGS)
            .say("done"),
    ));
    let config = AgentConfig {
        retry_attempts: 0,
        ..AgentConfig::default()
    };
    let mut agent =
        Agent::with_functions(engine.clone(), config, weather_registry()).unwrap();
    let events = agent.full_round("weather?").await.unwrap();
    assert!(matches!(events.last().unwrap(), RoundEvent::FinalMessage(m) if m.content() == "done"));

    let recorded = engine.recorded_calls();
    assert_eq!(recorded[0].functions, vec!["get_weather"]);
    // After the first failure the model sees no functions at all.
    assert!(recorded[1].functions.is_empty());
    assert!(recorded[2].functions.is_empty());
}

#[tokio::test]
async fn round_terminates_after_max_function_rounds() {
    let executions = Arc::new(AtomicUsize::new(0));
    let counter = executions.clone();
    let ping = AIFunction::new("ping", "Ping.", vec![], move |_| {
        let counter = counter.clone();
        async move {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(Value::String("pong".into()))
        }
    })
    .unwrap();
    let mut script = Script::new();
    for _ in 0..4 {
        script = script.call("ping", "{}");
    }
    let engine = Arc::new(ScriptedEngine::new(script));
    let config = AgentConfig {
        max_function_rounds: 3,
        ..AgentConfig::default()
    };
    let mut agent =
        Agent::with_functions(engine.clone(), config, FunctionRegistry::from_functions([ping]))
            .unwrap();
    let events = agent.full_round("go").await.unwrap();

    assert_eq!(executions.load(Ordering::SeqCst), 3);
    assert!(matches!(events.last().unwrap(), RoundEvent::FinalMessage(_)));
    // The forced final prediction exposes no functions.
    let recorded = engine.recorded_calls();
    assert!(recorded.last().unwrap().functions.is_empty());
}

#[tokio::test]
async fn full_round_rolls_back_wholesale_on_engine_error() {
    let engine = Arc::new(ScriptedEngine::new(
        // The script ends before the round does.
        Script::new().call("get_weather", WEATHER_ARGS),
    ));
    let mut agent =
        Agent::with_functions(engine, AgentConfig::default(), weather_registry()).unwrap();
    agent.load(br#"{"version":1,"messages":[{"role":"user","content":"old","name":null,"function_call":null}]}"# as &[u8]).unwrap();
    let err = agent.full_round("weather?").await.unwrap_err();
    assert!(matches!(err, AgentError::Engine(EngineError::ScriptExhausted(_))));
    assert_eq!(agent.history(), &[ChatMessage::user("old")]);
}

#[tokio::test]
async fn every_prompt_respects_the_budget_inequality() {
    let desired = 64;
    let inner = ScriptedEngine::new(
        Script::new()
            .call("get_weather", WEATHER_ARGS)
            .say("sunny")
            .say("bye"),
    )
    .with_max_context(512);
    let engine = Arc::new(BudgetCheckEngine {
        inner,
        desired_response_tokens: desired,
    });
    let config = AgentConfig {
        system_prompt: Some("stay concise and factual at all times".into()),
        desired_response_tokens: desired,
        ..AgentConfig::default()
    };
    let mut agent = Agent::with_functions(engine, config, weather_registry()).unwrap();
    agent.full_round("what's the weather in San Francisco today").await.unwrap();
    agent.chat_round("thanks!").await.unwrap();
}

// Prompt-builder override: keep only the last two history messages, as an
// application would to cap recall.
struct AmnesiaHooks;

#[async_trait]
impl AgentHooks for AmnesiaHooks {
    async fn build_prompt(&mut self, state: &AgentState) -> Result<Vec<ChatMessage>, AgentError> {
        let history = state.history();
        let tail = history.len().saturating_sub(2);
        Ok(state
            .persistent_messages()
            .iter()
            .chain(&history[tail..])
            .cloned()
            .collect())
    }
}

#[tokio::test]
async fn amnesia_prompt_override_limits_recall() {
    let engine = Arc::new(ScriptedEngine::new(
        Script::new()
            .say("Hello Andrew! How can I assist you today?")
            .say("\"Kani\" in Japanese means \"Crab\".")
            .say("As an AI, I don't have access to that data.")
            .check_prompt(|messages, _| {
                // Two persistent messages plus at most two recent ones; the
                // name from the first turn is long gone.
                assert_eq!(messages.len(), 3);
                assert!(!messages.iter().any(|m| m.content().contains("Andrew")));
            }),
    ));
    let config = AgentConfig {
        system_prompt: Some("be helpful".into()),
        ..AgentConfig::default()
    };
    let mut agent =
        Agent::with_hooks(engine, config, FunctionRegistry::new(), AmnesiaHooks).unwrap();
    agent.chat_round("Hi kani! My name is Andrew.").await.unwrap();
    agent.chat_round("What does \"kani\" mean in Japanese?").await.unwrap();
    agent.chat_round("What is my name?").await.unwrap();
}

// Exception-handler override: relay errors as system instructions instead of
// the default feedback.
struct SarcasticHooks;

#[async_trait]
impl AgentHooks for SarcasticHooks {
    async fn handle_function_call_exception(
        &mut self,
        state: &mut AgentState,
        _call: &FunctionCall,
        err: &CallError,
        attempt: u32,
    ) -> bool {
        state.append_history(ChatMessage::system(format!(
            "The call encountered an error. Relay it to the user sarcastically: {err}"
        )));
        attempt < state.config().retry_attempts
    }
}

#[tokio::test]
async fn exception_override_shapes_the_next_prompt() {
    let failing = AIFunction::new("get_time", "Get the current time.", vec![], |_| async {
        Err("The API is offline".to_string())
    })
    .unwrap();
    let engine = Arc::new(ScriptedEngine::new(
        Script::new().call("get_time", "{}").say(
            "Well, it seems like our handy-dandy time API decided to take a coffee break...",
        )
        .check_prompt(|messages, _| {
            let last = messages.last().unwrap();
            assert_eq!(last.role(), ChatRole::System);
            assert!(last.content().contains("sarcastically"));
            assert!(last.content().contains("The API is offline"));
        }),
    ));
    let mut agent = Agent::with_hooks(
        engine,
        AgentConfig::default(),
        FunctionRegistry::from_functions([failing]),
        SarcasticHooks,
    )
    .unwrap();
    let events = agent.full_round("What time is it?").await.unwrap();
    // The override spoke as the system, so nothing entered the trace in the
    // function's voice.
    let shapes: Vec<bool> = events
        .iter()
        .map(|e| matches!(e, RoundEvent::FunctionResult(_)))
        .collect();
    assert_eq!(shapes, [false, false]);
}

// Call-executor override: count successes and failures per function.
#[derive(Default)]
struct TrackingHooks {
    successful_calls: std::collections::HashMap<String, u32>,
    failed_calls: std::collections::HashMap<String, u32>,
}

#[async_trait]
impl AgentHooks for TrackingHooks {
    async fn do_function_call(
        &mut self,
        state: &mut AgentState,
        call: &FunctionCall,
    ) -> Result<ChatMessage, CallError> {
        match state.execute_call(call).await {
            Ok(message) => {
                *self.successful_calls.entry(call.name().into()).or_default() += 1;
                Ok(message)
            }
            Err(err) => {
                *self.failed_calls.entry(call.name().into()).or_default() += 1;
                Err(err)
            }
        }
    }
}

#[tokio::test]
async fn tracking_override_counts_call_outcomes() {
    let get_time = AIFunction::new("get_time", "Get the current time.", vec![], |_| async {
        Err("The time API is offline".to_string())
    })
    .unwrap();
    let get_date_and_time =
        AIFunction::new("get_date_and_time", "Get the current day and time.", vec![], |_| async {
            Ok(Value::String("2023-09-01 22:42:00".into()))
        })
        .unwrap();
    let engine = Arc::new(ScriptedEngine::new(
        Script::new()
            .call("get_time", "{}")
            .call("get_date_and_time", "{}")
            .say("The current time is 22:42."),
    ));
    let mut agent = Agent::with_hooks(
        engine,
        AgentConfig::default(),
        FunctionRegistry::from_functions([get_time, get_date_and_time]),
        TrackingHooks::default(),
    )
    .unwrap();
    agent.full_round("What time is it?").await.unwrap();

    let hooks = agent.hooks();
    assert_eq!(hooks.successful_calls.len(), 1);
    assert_eq!(hooks.successful_calls["get_date_and_time"], 1);
    assert_eq!(hooks.failed_calls.len(), 1);
    assert_eq!(hooks.failed_calls["get_time"], 1);
    // An unknown name never reaches the executor hook.
    assert!(!hooks.failed_calls.contains_key("get_wether"));
}

// Prompt-builder override that injects a persona instruction when the user
// asks for one.
struct PersonaHooks {
    persona: Option<String>,
}

#[async_trait]
impl AgentHooks for PersonaHooks {
    async fn build_prompt(&mut self, state: &AgentState) -> Result<Vec<ChatMessage>, AgentError> {
        if let Some(last) = state.history().last() {
            if let Some(rest) = last.content().split_once("act like ").map(|(_, r)| r) {
                self.persona = Some(rest.trim_end_matches('.').to_string());
            }
        }
        let mut prompt = Vec::new();
        if let Some(persona) = &self.persona {
            prompt.push(ChatMessage::system(format!("Always act like {persona}.")));
        }
        prompt.extend(state.default_prompt()?);
        Ok(prompt)
    }
}

#[tokio::test]
async fn persona_override_prepends_dynamic_instruction() {
    let engine = Arc::new(ScriptedEngine::new(
        Script::new().say("Arr, aye!").check_prompt(|messages, _| {
            assert_eq!(
                messages[0],
                ChatMessage::system("Always act like a pirate.")
            );
        }),
    ));
    let mut agent = Agent::with_hooks(
        engine,
        AgentConfig::default(),
        FunctionRegistry::new(),
        PersonaHooks { persona: None },
    )
    .unwrap();
    agent.chat_round("Please act like a pirate.").await.unwrap();
}

#[tokio::test]
async fn subagent_copies_history_and_shares_nothing() {
    let parent_engine = Arc::new(ScriptedEngine::new(Script::new()));
    let child_engine = Arc::new(ScriptedEngine::new(Script::new().say("summary of it all")));
    let mut parent = Agent::new(parent_engine.clone(), AgentConfig::default()).unwrap();

    let ten: Vec<ChatMessage> = (0..10)
        .map(|i| ChatMessage::user(format!("turn {i}")))
        .collect();
    load_history(&mut parent, &ten);

    let slice = parent.history()[..parent.history().len() - 2].to_vec();
    let mut child = parent.spawn_subagent(child_engine.clone(), slice);
    assert_eq!(child.history().len(), 8);

    child.chat_round("Please summarize the conversation so far.").await.unwrap();
    assert_eq!(child.history().len(), 10);
    // The parent saw none of it: history untouched, engine never called.
    assert_eq!(parent.history().len(), 10);
    assert!(parent_engine.recorded_calls().is_empty());
    assert_eq!(child_engine.recorded_calls().len(), 1);
}

#[tokio::test]
async fn subagent_with_empty_slice_starts_fresh() {
    let engine = Arc::new(ScriptedEngine::new(Script::new()));
    let parent = Agent::new(engine.clone(), AgentConfig::default()).unwrap();
    let child = parent.spawn_subagent(engine, Vec::new());
    assert!(child.history().is_empty());
}

#[tokio::test]
async fn usage_diagnostics_accumulate() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("one two").say("three")));
    let mut agent = Agent::new(engine, AgentConfig::default()).unwrap();
    agent.chat_round("a b c").await.unwrap();
    let first = agent.usage();
    assert!(first.last_prompt_tokens > 0);
    assert_eq!(first.last_completion_tokens, 3);
    agent.chat_round("d").await.unwrap();
    let second = agent.usage();
    assert_eq!(
        second.total_completion_tokens,
        first.total_completion_tokens + 2
    );
}

#[tokio::test]
async fn transcripts_round_trip_through_the_agent() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("hello")));
    let mut agent = Agent::new(engine.clone(), AgentConfig::default()).unwrap();
    agent.chat_round("hi").await.unwrap();
    let mut saved = Vec::new();
    agent.save(&mut saved).unwrap();

    let mut replica = Agent::new(engine, AgentConfig::default()).unwrap();
    replica.load(&saved[..]).unwrap();
    assert_eq!(replica.history(), agent.history());
}

#[tokio::test]
async fn concurrent_agents_share_one_engine() {
    let engine = Arc::new(ScriptedEngine::new(Script::new().say("r1").say("r2")));
    let mut a = Agent::new(engine.clone(), AgentConfig::default()).unwrap();
    let mut b = Agent::new(engine.clone(), AgentConfig::default()).unwrap();
    let (ra, rb) = tokio::join!(a.chat_round("from a"), b.chat_round("from b"));
    let mut replies = vec![ra.unwrap().content().to_string(), rb.unwrap().content().to_string()];
    replies.sort();
    assert_eq!(replies, ["r1", "r2"]);
    assert_eq!(engine.recorded_calls().len(), 2);
}

#[tokio::test]
async fn rejects_config_larger_than_the_context() {
    let engine = Arc::new(ScriptedEngine::new(Script::new()).with_max_context(100));
    let config = AgentConfig {
        desired_response_tokens: 100,
        ..AgentConfig::default()
    };
    assert!(matches!(
        Agent::new(engine, config),
        Err(AgentError::InvalidConfig(_))
    ));
}
