//! Engine construction from command-line flags and environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use async_trait::async_trait;
use clap::{Args, ValueEnum};

use crab::engines::http::{HttpEngine, HttpEngineConfig};
use crab::engines::llama2::{Llama2Engine, LlamaBackend, MockTokenizer, TokenId, TokenizerAdapter};
use crab::engines::scripted::{Script, ScriptedEngine};
use crab::{Engine, HyperParams};

pub const ENV_API_KEY: &str = "CRAB_API_KEY";
pub const ENV_BASE_URL: &str = "CRAB_BASE_URL";
pub const ENV_MODEL: &str = "CRAB_MODEL";

const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
const DEFAULT_MODEL: &str = "gpt-4";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EngineKind {
    /// OpenAI-compatible chat-completions API; reads CRAB_API_KEY,
    /// CRAB_BASE_URL, and CRAB_MODEL.
    Http,
    /// LLaMA-2 chat template over the mock tokenizer with a canned-reply
    /// backend; demonstrates prompt building and token accounting offline.
    LlamaMock,
    /// Deterministic playback of a script file (see --script).
    Scripted,
}

#[derive(Debug, Clone, Args)]
pub struct EngineArgs {
    /// Inference engine to talk to.
    #[arg(long, value_enum, default_value_t = EngineKind::LlamaMock)]
    pub engine: EngineKind,
    /// Script file for the scripted engine: a JSON array of
    /// {"say": ...} / {"call": {"name", "arguments"}} steps.
    #[arg(long)]
    pub script: Option<PathBuf>,
    /// System prompt for the conversation.
    #[arg(long)]
    pub system: Option<String>,
}

/// Demo backend for the mock LLaMA engine: replies with the prompt's token
/// count, which makes the accounting visible from the terminal.
struct TokenCountBackend {
    tokenizer: Arc<MockTokenizer>,
}

#[async_trait]
impl LlamaBackend for TokenCountBackend {
    async fn generate(
        &self,
        input: &[TokenId],
        _hyperparams: &HyperParams,
    ) -> Result<Vec<TokenId>, String> {
        let mut output = input.to_vec();
        output.extend(
            self.tokenizer
                .encode(&format!("(mock reply; your prompt held {} tokens)", input.len())),
        );
        output.push(self.tokenizer.stop_token());
        Ok(output)
    }
}

pub fn scripted_engine_from_file(path: &Path) -> anyhow::Result<Arc<dyn Engine>> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read script file {}", path.display()))?;
    let script = Script::from_json(&bytes)
        .with_context(|| format!("cannot parse script file {}", path.display()))?;
    Ok(Arc::new(ScriptedEngine::new(script)))
}

/// Builds the engine an agent or service will run on. Configuration errors
/// (missing key, missing script) surface as `Err` so the caller can exit
/// with a configuration failure.
pub fn build_engine(args: &EngineArgs) -> anyhow::Result<Arc<dyn Engine>> {
    match args.engine {
        EngineKind::Http => {
            let api_key = std::env::var(ENV_API_KEY)
                .with_context(|| format!("{ENV_API_KEY} must be set for the http engine"))?;
            let base_url =
                std::env::var(ENV_BASE_URL).unwrap_or_else(|_| DEFAULT_BASE_URL.to_string());
            let model = std::env::var(ENV_MODEL).unwrap_or_else(|_| DEFAULT_MODEL.to_string());
            let engine = HttpEngine::new(HttpEngineConfig::new(base_url, api_key, model))?;
            Ok(Arc::new(engine))
        }
        EngineKind::LlamaMock => {
            let tokenizer = Arc::new(MockTokenizer::new());
            let backend = TokenCountBackend {
                tokenizer: tokenizer.clone(),
            };
            Ok(Arc::new(Llama2Engine::new(tokenizer, backend)))
        }
        EngineKind::Scripted => {
            let Some(path) = &args.script else {
                bail!("--script is required with --engine scripted");
            };
            scripted_engine_from_file(path)
        }
    }
}
