//! Chat message data model and transcript persistence.
//!
//! Messages are immutable values: every constructor validates the
//! role/name/function_call combination once, and the fields cannot be edited
//! afterwards. Transcripts serialize to a stable JSON layout (absent optionals
//! are explicit `null`s) so saved conversations diff cleanly and round-trip
//! losslessly.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

/// Errors from message construction and transcript persistence.
#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    /// The role/name/function_call combination is not a valid message.
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    /// The sink or source failed.
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// The transcript is not valid JSON, has an unknown role, or an
    /// unsupported version.
    #[error("malformed transcript: {0}")]
    Format(String),
}

/// Who authored a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
    Function,
}

impl fmt::Display for ChatRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
            ChatRole::Function => "function",
        })
    }
}

/// A model's request to invoke a named function.
///
/// `arguments` is kept verbatim as received from the engine. It is usually a
/// JSON object, but it may be malformed; validation happens in the function
/// registry, not here, so bad model output survives persistence and can be
/// replayed in tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFunctionCall")]
pub struct FunctionCall {
    name: String,
    arguments: String,
}

impl FunctionCall {
    /// Creates a call request. The name must be non-empty; the arguments are
    /// stored as-is.
    pub fn new(name: impl Into<String>, arguments: impl Into<String>) -> Result<Self, ChatError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ChatError::InvalidMessage(
                "function call name must not be empty".into(),
            ));
        }
        Ok(Self {
            name,
            arguments: arguments.into(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The raw argument text, exactly as the model produced it.
    pub fn arguments(&self) -> &str {
        &self.arguments
    }
}

#[derive(Deserialize)]
struct RawFunctionCall {
    name: String,
    arguments: String,
}

impl TryFrom<RawFunctionCall> for FunctionCall {
    type Error = String;

    fn try_from(raw: RawFunctionCall) -> Result<Self, Self::Error> {
        FunctionCall::new(raw.name, raw.arguments).map_err(|e| e.to_string())
    }
}

/// One turn of conversation.
///
/// Invariants enforced at construction and on deserialization:
/// - only assistant messages may carry a `function_call`;
/// - function messages always carry a `name` (the function that produced the
///   content);
/// - a `name` is otherwise only allowed on user messages (multi-user
///   conversations).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawChatMessage")]
pub struct ChatMessage {
    role: ChatRole,
    content: String,
    name: Option<String>,
    function_call: Option<FunctionCall>,
}

#[derive(Deserialize)]
struct RawChatMessage {
    role: ChatRole,
    #[serde(default)]
    content: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default)]
    function_call: Option<FunctionCall>,
}

impl TryFrom<RawChatMessage> for ChatMessage {
    type Error = String;

    fn try_from(raw: RawChatMessage) -> Result<Self, Self::Error> {
        ChatMessage::new(raw.role, raw.content, raw.name, raw.function_call)
            .map_err(|e| e.to_string())
    }
}

impl ChatMessage {
    /// General constructor checking the message invariants.
    pub fn new(
        role: ChatRole,
        content: impl Into<String>,
        name: Option<String>,
        function_call: Option<FunctionCall>,
    ) -> Result<Self, ChatError> {
        if function_call.is_some() && role != ChatRole::Assistant {
            return Err(ChatError::InvalidMessage(format!(
                "only assistant messages may carry a function_call, not {role}"
            )));
        }
        match role {
            ChatRole::Function if name.is_none() => {
                return Err(ChatError::InvalidMessage(
                    "function messages must be named after the function that produced them".into(),
                ));
            }
            ChatRole::System | ChatRole::Assistant if name.is_some() => {
                return Err(ChatError::InvalidMessage(format!(
                    "{role} messages do not take a name"
                )));
            }
            _ => {}
        }
        Ok(Self {
            role,
            content: content.into(),
            name,
            function_call,
        })
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
            name: None,
            function_call: None,
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
            name: None,
            function_call: None,
        }
    }

    /// A user message attributed to a participant in a multi-user
    /// conversation.
    pub fn user_named(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
            name: Some(name.into()),
            function_call: None,
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
            name: None,
            function_call: None,
        }
    }

    /// An assistant message requesting a function invocation.
    pub fn assistant_with_call(content: impl Into<String>, call: FunctionCall) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
            name: None,
            function_call: Some(call),
        }
    }

    /// The output of a function, named after the function that produced it.
    pub fn function(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Function,
            content: content.into(),
            name: Some(name.into()),
            function_call: None,
        }
    }

    pub fn role(&self) -> ChatRole {
        self.role
    }

    pub fn content(&self) -> &str {
        &self.content
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn function_call(&self) -> Option<&FunctionCall> {
        self.function_call.as_ref()
    }
}

/// The version written by [`save_transcript`] and accepted by
/// [`load_transcript`].
pub const TRANSCRIPT_VERSION: u32 = 1;

/// A versioned, ordered list of messages; the on-disk conversation format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub messages: Vec<ChatMessage>,
}

#[derive(Serialize)]
struct TranscriptRef<'a> {
    version: u32,
    messages: &'a [ChatMessage],
}

/// Writes the messages as UTF-8 JSON.
///
/// The layout is stable: keys appear in declaration order and absent
/// optionals serialize as explicit `null`, so equal transcripts produce
/// byte-identical output.
pub fn save_transcript<W: Write>(messages: &[ChatMessage], mut sink: W) -> Result<(), ChatError> {
    let transcript = TranscriptRef {
        version: TRANSCRIPT_VERSION,
        messages,
    };
    serde_json::to_writer(&mut sink, &transcript).map_err(io_or_format)?;
    Ok(())
}

/// Reads messages written by [`save_transcript`].
///
/// Unknown extra keys are ignored; malformed JSON, unknown roles, invalid
/// messages, and unsupported versions are rejected.
pub fn load_transcript<R: Read>(source: R) -> Result<Vec<ChatMessage>, ChatError> {
    let transcript: Transcript = serde_json::from_reader(source).map_err(io_or_format)?;
    if transcript.version != TRANSCRIPT_VERSION {
        return Err(ChatError::Format(format!(
            "unsupported transcript version {}",
            transcript.version
        )));
    }
    Ok(transcript.messages)
}

fn io_or_format(err: serde_json::Error) -> ChatError {
    match err.io_error_kind() {
        Some(kind) => ChatError::Io(std::io::Error::new(kind, err)),
        None => ChatError::Format(err.to_string()),
    }
}
