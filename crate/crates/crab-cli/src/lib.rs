//! Terminal chat and WebSocket hosting around the `crab` framework.

pub mod engine_setup;
pub mod repl;
pub mod service;
