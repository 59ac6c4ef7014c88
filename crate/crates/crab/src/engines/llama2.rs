//! Chat-template prompt builder with exact token accounting for
//! LLaMA-2-style instruction models.
//!
//! The template wraps each user message in `[INST] ... [/INST]`, closes each
//! user/assistant pair with the stop marker, and folds system-style messages
//! into the following instruction block via `<<SYS>> ... <</SYS>>`. Real
//! subword tokenizers stay behind [`TokenizerAdapter`]; the bundled
//! [`MockTokenizer`] counts whitespace words and prices the template wrappers
//! at the reference costs, so the accounting arithmetic is testable at desk
//! scale without model downloads.
//!
//! Accounting contract: summing [`template_message_len`] over a conversation
//! never undercounts the built prompt for chat-shaped histories (an optional
//! system prefix, user/assistant alternation, system guidance directly before
//! a user message, a trailing user message), and is exact on complete
//! user/assistant pairs with at most one leading system message. Rounds
//! without any user message (e.g. a bare assistant message) cost the builder
//! a few wrapper tokens nobody declared; the agent's chat flow never produces
//! those shapes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use crate::chat::{ChatMessage, ChatRole};
use crate::engine::{Completion, Engine, EngineError, HyperParams};
use crate::functions::AIFunction;

pub type TokenId = u32;

const INST_OPEN: &str = "[INST]";
const INST_CLOSE: &str = "[/INST]";
const SYS_OPEN: &str = "<<SYS>>";
const SYS_CLOSE: &str = "<</SYS>>";

/// The special wrapper pieces the chat template inserts around messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpecialToken {
    Bos,
    Eos,
    InstOpen,
    InstClose,
    SysOpen,
    SysClose,
}

/// A deterministic tokenizer the template builder can price prompts with.
pub trait TokenizerAdapter: Send + Sync {
    /// Encodes text, expanding any embedded template markers to their
    /// special token ids. Deterministic for a given adapter instance.
    fn encode(&self, text: &str) -> Vec<TokenId>;

    /// Inverse of `encode` for content tokens; special ids decode to
    /// nothing.
    fn decode(&self, tokens: &[TokenId]) -> String;

    /// The ids a special wrapper expands to; the vector length is that
    /// wrapper's token cost.
    fn special_tokens(&self, special: SpecialToken) -> Vec<TokenId>;

    /// The id generation stops at.
    fn stop_token(&self) -> TokenId;

    /// Per-role overhead [`template_message_len`] adds on top of the content
    /// tokens. The defaults price the reference template wrappers: a user
    /// message pays for `<s> [INST] ... [/INST]`, an assistant message for
    /// its padding and stop marker, anything else for a `<<SYS>>` block.
    fn role_overhead(&self, role: ChatRole) -> usize {
        match role {
            ChatRole::User => 7,
            ChatRole::Assistant => 2,
            _ => 20,
        }
    }
}

impl<T: TokenizerAdapter + ?Sized> TokenizerAdapter for Arc<T> {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        (**self).encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        (**self).decode(tokens)
    }

    fn special_tokens(&self, special: SpecialToken) -> Vec<TokenId> {
        (**self).special_tokens(special)
    }

    fn stop_token(&self) -> TokenId {
        (**self).stop_token()
    }

    fn role_overhead(&self, role: ChatRole) -> usize {
        (**self).role_overhead(role)
    }
}

const BOS_ID: TokenId = 1;
const EOS_STOP_ID: TokenId = 2;
const EOS_SPACE_ID: TokenId = 3;
const INST_OPEN_IDS: [TokenId; 3] = [10, 11, 12];
const INST_CLOSE_IDS: [TokenId; 3] = [13, 14, 15];
const SYS_OPEN_BASE: TokenId = 20; // 9 ids
const SYS_CLOSE_BASE: TokenId = 40; // 11 ids
const WORD_ID_BASE: TokenId = 100;

/// Whitespace-word tokenizer with reference wrapper costs.
///
/// Every whitespace-separated word is one token; words are interned per
/// instance so encoding is deterministic and decodable. Wrapper costs follow
/// the reference template: `<s>` is 1 token, `[INST]`/`[/INST]` are 3 each,
/// the `<<SYS>>`/`<</SYS>>` pair totals 20, and closing a pair spends 2 (the
/// trailing space piece plus the stop id).
pub struct MockTokenizer {
    vocab: Mutex<Vocab>,
}

#[derive(Default)]
struct Vocab {
    ids: HashMap<String, TokenId>,
    words: Vec<String>,
}

impl Vocab {
    fn intern(&mut self, word: &str) -> TokenId {
        if let Some(id) = self.ids.get(word) {
            return *id;
        }
        let id = WORD_ID_BASE + self.words.len() as TokenId;
        self.ids.insert(word.to_string(), id);
        self.words.push(word.to_string());
        id
    }

    fn word(&self, id: TokenId) -> Option<&str> {
        if id < WORD_ID_BASE {
            return None;
        }
        self.words.get((id - WORD_ID_BASE) as usize).map(|s| s.as_str())
    }
}

impl MockTokenizer {
    pub fn new() -> Self {
        Self {
            vocab: Mutex::new(Vocab::default()),
        }
    }

    fn intern_words(&self, text: &str, out: &mut Vec<TokenId>) {
        let mut vocab = self.vocab.lock().unwrap();
        for word in text.split_whitespace() {
            out.push(vocab.intern(word));
        }
    }
}

impl Default for MockTokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl TokenizerAdapter for MockTokenizer {
    fn encode(&self, text: &str) -> Vec<TokenId> {
        const MARKERS: [(&str, SpecialToken); 4] = [
            (INST_OPEN, SpecialToken::InstOpen),
            (INST_CLOSE, SpecialToken::InstClose),
            (SYS_OPEN, SpecialToken::SysOpen),
            (SYS_CLOSE, SpecialToken::SysClose),
        ];
        let mut out = Vec::new();
        let mut rest = text;
        loop {
            let mut earliest: Option<(usize, &str, SpecialToken)> = None;
            for (marker, special) in MARKERS {
                if let Some(pos) = rest.find(marker) {
                    let better = match earliest {
                        None => true,
                        Some((best_pos, best_marker, _)) => {
                            pos < best_pos || (pos == best_pos && marker.len() > best_marker.len())
                        }
                    };
                    if better {
                        earliest = Some((pos, marker, special));
                    }
                }
            }
            match earliest {
                Some((pos, marker, special)) => {
                    self.intern_words(&rest[..pos], &mut out);
                    out.extend(self.special_tokens(special));
                    rest = &rest[pos + marker.len()..];
                }
                None => {
                    self.intern_words(rest, &mut out);
                    return out;
                }
            }
        }
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        let vocab = self.vocab.lock().unwrap();
        tokens
            .iter()
            .filter_map(|id| vocab.word(*id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn special_tokens(&self, special: SpecialToken) -> Vec<TokenId> {
        match special {
            SpecialToken::Bos => vec![BOS_ID],
            // Trailing space piece, then the stop marker.
            SpecialToken::Eos => vec![EOS_SPACE_ID, EOS_STOP_ID],
            SpecialToken::InstOpen => INST_OPEN_IDS.to_vec(),
            SpecialToken::InstClose => INST_CLOSE_IDS.to_vec(),
            SpecialToken::SysOpen => (SYS_OPEN_BASE..SYS_OPEN_BASE + 9).collect(),
            SpecialToken::SysClose => (SYS_CLOSE_BASE..SYS_CLOSE_BASE + 11).collect(),
        }
    }

    fn stop_token(&self) -> TokenId {
        EOS_STOP_ID
    }
}

fn flush_round(
    tok: &dyn TokenizerAdapter,
    buf: &mut Vec<String>,
    tokens: &mut Vec<TokenId>,
    closed: bool,
) {
    // A block that closes an instruction directly before the next one opens
    // (system-then-user, user-then-user) merges into a single block.
    let round = buf.concat().replace(" [/INST][INST] ", "");
    tokens.extend(tok.special_tokens(SpecialToken::Bos));
    tokens.extend(tok.encode(&round));
    if closed {
        tokens.extend(tok.special_tokens(SpecialToken::Eos));
    }
    buf.clear();
}

/// Assembles the wire prompt for a conversation.
///
/// Each completed user/assistant round becomes
/// `<s>[INST] {user} [/INST] {assistant} </s>`; system-style messages fold
/// into the following instruction block as a `<<SYS>>` section; a trailing
/// unpaired buffer (typically the final user message) is flushed without the
/// stop marker.
pub fn build_prompt_tokens(tok: &dyn TokenizerAdapter, messages: &[ChatMessage]) -> Vec<TokenId> {
    let mut tokens = Vec::new();
    let mut buf: Vec<String> = Vec::new();
    for message in messages {
        match message.role() {
            ChatRole::User => buf.push(format!("[INST] {} [/INST]", message.content())),
            ChatRole::Assistant => {
                buf.push(format!(" {} ", message.content()));
                flush_round(tok, &mut buf, &mut tokens, true);
            }
            _ => buf.push(format!(
                "[INST] <<SYS>>\n{}\n<</SYS>>\n\n [/INST]",
                message.content()
            )),
        }
    }
    if !buf.is_empty() {
        flush_round(tok, &mut buf, &mut tokens, false);
    }
    tokens
}

/// Token length of one message under the chat template, wrapper overhead
/// included.
pub fn template_message_len(tok: &dyn TokenizerAdapter, message: &ChatMessage) -> usize {
    match message.role() {
        ChatRole::Assistant => {
            tok.encode(&format!(" {} ", message.content())).len()
                + tok.role_overhead(ChatRole::Assistant)
        }
        role => tok.encode(message.content()).len() + tok.role_overhead(role),
    }
}

/// A text-generation backend operating on token ids.
#[async_trait]
pub trait LlamaBackend: Send + Sync {
    /// Produces the full output sequence: the input tokens followed by the
    /// generated tokens, ending with the stop token.
    async fn generate(
        &self,
        input: &[TokenId],
        hyperparams: &HyperParams,
    ) -> Result<Vec<TokenId>, String>;

    /// Backends that can only serve one generation at a time return true;
    /// the engine then serializes predictions internally.
    fn single_stream(&self) -> bool {
        false
    }
}

/// Test backend: echoes the prompt and generates a fixed reply.
pub struct FixedReplyBackend {
    tokenizer: Arc<MockTokenizer>,
    reply: String,
    single_stream: bool,
}

impl FixedReplyBackend {
    pub fn new(tokenizer: Arc<MockTokenizer>, reply: impl Into<String>) -> Self {
        Self {
            tokenizer,
            reply: reply.into(),
            single_stream: false,
        }
    }

    pub fn single_stream(mut self) -> Self {
        self.single_stream = true;
        self
    }
}

#[async_trait]
impl LlamaBackend for FixedReplyBackend {
    async fn generate(
        &self,
        input: &[TokenId],
        _hyperparams: &HyperParams,
    ) -> Result<Vec<TokenId>, String> {
        let mut output = input.to_vec();
        output.extend(self.tokenizer.encode(&self.reply));
        output.push(self.tokenizer.stop_token());
        Ok(output)
    }

    fn single_stream(&self) -> bool {
        self.single_stream
    }
}

/// Engine driving a token backend through the chat template.
///
/// Function schemas are ignored: this model family has no native function
/// calling, so applications that want it must parse calls out of the text
/// themselves.
pub struct Llama2Engine<T, B> {
    tokenizer: T,
    backend: B,
    max_context_size: usize,
    default_hyperparams: HyperParams,
    closed: AtomicBool,
    stream_lock: Option<tokio::sync::Mutex<()>>,
}

impl<T: TokenizerAdapter, B: LlamaBackend> Llama2Engine<T, B> {
    pub fn new(tokenizer: T, backend: B) -> Self {
        let stream_lock = backend.single_stream().then(|| tokio::sync::Mutex::new(()));
        Self {
            tokenizer,
            backend,
            max_context_size: 4096,
            default_hyperparams: HyperParams::new(),
            closed: AtomicBool::new(false),
            stream_lock,
        }
    }

    pub fn with_max_context(mut self, tokens: usize) -> Self {
        self.max_context_size = tokens;
        self
    }

    pub fn with_default_hyperparams(mut self, hyperparams: HyperParams) -> Self {
        self.default_hyperparams = hyperparams;
        self
    }

    pub fn tokenizer(&self) -> &T {
        &self.tokenizer
    }
}

#[async_trait]
impl<T, B> Engine for Llama2Engine<T, B>
where
    T: TokenizerAdapter,
    B: LlamaBackend,
{
    fn max_context_size(&self) -> usize {
        self.max_context_size
    }

    fn message_len(&self, message: &ChatMessage) -> usize {
        template_message_len(&self.tokenizer, message)
    }

    async fn predict(
        &self,
        messages: &[ChatMessage],
        _functions: &[AIFunction],
        hyperparams: &HyperParams,
    ) -> Result<Completion, EngineError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(EngineError::Closed);
        }
        let input = build_prompt_tokens(&self.tokenizer, messages);
        let mut merged = self.default_hyperparams.clone();
        for (key, value) in hyperparams {
            merged.insert(key.clone(), value.clone());
        }
        let _guard = match &self.stream_lock {
            Some(lock) => Some(lock.lock().await),
            None => None,
        };
        let output = self
            .backend
            .generate(&input, &merged)
            .await
            .map_err(EngineError::Transport)?;
        if output.len() < input.len() + 1 {
            return Err(EngineError::Protocol(format!(
                "backend returned {} tokens for a {}-token prompt",
                output.len(),
                input.len()
            )));
        }
        // The completion excludes the prompt and the trailing stop token.
        let content = self.tokenizer.decode(&output[input.len()..output.len() - 1]);
        let completion_tokens = output.len() - (input.len() + 1);
        Ok(Completion::new(
            ChatMessage::assistant(content),
            input.len(),
            completion_tokens,
        ))
    }

    async fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}
