//! Concrete engine implementations: an HTTP client for OpenAI-compatible
//! chat APIs, a LLaMA-2 chat-template builder with exact token accounting,
//! and a deterministic scripted engine for tests.

pub mod http;
pub mod llama2;
pub mod scripted;
