//! Function registration, schema description, and argument validation.
//!
//! Everything a model sends is untrusted: names may be hallucinated,
//! arguments may be malformed JSON or carry wrong types. [`FunctionRegistry`]
//! guarantees that a handler only ever runs with arguments that satisfy its
//! declared parameter types, and maps every possible failure onto exactly one
//! [`CallErrorKind`] so the agent can give the model targeted feedback.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use futures::future::BoxFuture;
use futures::FutureExt;
use indexmap::IndexMap;
use serde_json::{json, Map, Value};

use crate::chat::FunctionCall;

/// Arguments after validation: every required parameter present and coerced
/// to its declared type, unknown keys rejected.
pub type ArgMap = Map<String, Value>;

type Handler = Arc<dyn Fn(ArgMap) -> BoxFuture<'static, Result<Value, String>> + Send + Sync>;

/// The parameter type vocabulary models may use.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
    /// One of a fixed set of string variants.
    Enum(Vec<String>),
    List(Box<ParamType>),
    /// A parameter that may be omitted (or passed as `null`).
    Optional(Box<ParamType>),
}

impl ParamType {
    fn is_optional(&self) -> bool {
        matches!(self, ParamType::Optional(_))
    }

    fn check(&self) -> Result<(), FunctionDefError> {
        match self {
            ParamType::Enum(variants) => {
                if variants.is_empty() {
                    return Err(FunctionDefError::EmptyEnum);
                }
                for (i, v) in variants.iter().enumerate() {
                    if variants[..i].contains(v) {
                        return Err(FunctionDefError::DuplicateEnumVariant(v.clone()));
                    }
                }
                Ok(())
            }
            ParamType::List(element) => element.check(),
            ParamType::Optional(inner) => {
                if inner.is_optional() {
                    return Err(FunctionDefError::NestedOptional);
                }
                inner.check()
            }
            _ => Ok(()),
        }
    }

    /// JSON schema fragment for this type.
    fn schema(&self) -> Value {
        match self {
            ParamType::String => json!({"type": "string"}),
            ParamType::Integer => json!({"type": "integer"}),
            ParamType::Number => json!({"type": "number"}),
            ParamType::Boolean => json!({"type": "boolean"}),
            ParamType::Enum(variants) => json!({"type": "string", "enum": variants}),
            ParamType::List(element) => json!({"type": "array", "items": element.schema()}),
            ParamType::Optional(inner) => inner.schema(),
        }
    }

    /// Checks `value` against this type, returning the normalized value to
    /// hand to the handler. Integer-valued floats (`3.0`) are accepted for
    /// `Integer`; everything else must match exactly.
    fn coerce(&self, value: &Value, param: &str) -> Result<Value, String> {
        match self {
            ParamType::String => match value {
                Value::String(_) => Ok(value.clone()),
                other => Err(type_mismatch(param, "a string", other)),
            },
            ParamType::Integer => match value {
                Value::Number(n) if n.is_i64() || n.is_u64() => Ok(value.clone()),
                Value::Number(n) => {
                    let f = n.as_f64().unwrap_or(f64::NAN);
                    if f.fract() == 0.0 && f >= i64::MIN as f64 && f <= i64::MAX as f64 {
                        Ok(json!(f as i64))
                    } else {
                        Err(type_mismatch(param, "an integer", value))
                    }
                }
                other => Err(type_mismatch(param, "an integer", other)),
            },
            ParamType::Number => match value {
                Value::Number(_) => Ok(value.clone()),
                other => Err(type_mismatch(param, "a number", other)),
            },
            ParamType::Boolean => match value {
                Value::Bool(_) => Ok(value.clone()),
                other => Err(type_mismatch(param, "a boolean", other)),
            },
            ParamType::Enum(variants) => match value {
                Value::String(s) if variants.contains(s) => Ok(value.clone()),
                other => Err(format!(
                    "parameter '{param}' must be one of {variants:?}, got {other}"
                )),
            },
            ParamType::List(element) => match value {
                Value::Array(items) => {
                    let coerced: Result<Vec<Value>, String> = items
                        .iter()
                        .map(|item| element.coerce(item, param))
                        .collect();
                    Ok(Value::Array(coerced?))
                }
                other => Err(type_mismatch(param, "an array", other)),
            },
            ParamType::Optional(inner) => match value {
                Value::Null => Ok(Value::Null),
                other => inner.coerce(other, param),
            },
        }
    }
}

fn type_mismatch(param: &str, expected: &str, got: &Value) -> String {
    format!("parameter '{param}' must be {expected}, got {got}")
}

/// One declared parameter of an [`AIFunction`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    name: String,
    ty: ParamType,
    description: Option<String>,
    required: bool,
}

impl ParamSpec {
    /// Declares a parameter. Whether it is required follows from the type:
    /// only [`ParamType::Optional`] parameters may be omitted.
    pub fn new(name: impl Into<String>, ty: ParamType) -> Self {
        let required = !ty.is_optional();
        Self {
            name: name.into(),
            ty,
            description: None,
            required,
        }
    }

    /// Attaches a natural-language description shown to the model.
    pub fn describe(mut self, text: impl Into<String>) -> Self {
        self.description = Some(text.into());
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_type(&self) -> &ParamType {
        &self.ty
    }

    pub fn required(&self) -> bool {
        self.required
    }
}

/// Errors detected when declaring a function.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FunctionDefError {
    #[error("functions must be documented: description must not be empty")]
    EmptyDescription,
    #[error("duplicate parameter name '{0}'")]
    DuplicateParam(String),
    #[error("enums must declare at least one variant")]
    EmptyEnum,
    #[error("duplicate enum variant '{0}'")]
    DuplicateEnumVariant(String),
    #[error("optional must not directly wrap optional")]
    NestedOptional,
}

/// A registered callable the model may invoke.
///
/// Handlers receive validated arguments and return either text or any JSON
/// value, which is stringified with the canonical JSON encoding before it
/// goes back to the model. A handler signals failure by returning `Err` with
/// the failure text.
#[derive(Clone)]
pub struct AIFunction {
    name: String,
    description: String,
    params: Vec<ParamSpec>,
    handler: Handler,
    timeout: Option<Duration>,
}

impl fmt::Debug for AIFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AIFunction")
            .field("name", &self.name)
            .field("description", &self.description)
            .field("params", &self.params)
            .field("timeout", &self.timeout)
            .finish_non_exhaustive()
    }
}

impl AIFunction {
    /// Declares a function. The description is mandatory documentation and
    /// parameter names must be unique.
    pub fn new<F, Fut>(
        name: impl Into<String>,
        description: impl Into<String>,
        params: Vec<ParamSpec>,
        handler: F,
    ) -> Result<Self, FunctionDefError>
    where
        F: Fn(ArgMap) -> Fut + Send + Sync + 'static,
        Fut: std::future::Future<Output = Result<Value, String>> + Send + 'static,
    {
        let description = description.into();
        if description.is_empty() {
            return Err(FunctionDefError::EmptyDescription);
        }
        for (i, p) in params.iter().enumerate() {
            if params[..i].iter().any(|q| q.name == p.name) {
                return Err(FunctionDefError::DuplicateParam(p.name.clone()));
            }
            p.ty.check()?;
        }
        Ok(Self {
            name: name.into(),
            description,
            params,
            handler: Arc::new(move |args| handler(args).boxed()),
            timeout: None,
        })
    }

    /// Bounds handler execution time; expiry is reported as a wrapped call
    /// failure.
    pub fn with_timeout(mut self, limit: Duration) -> Self {
        self.timeout = Some(limit);
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn params(&self) -> &[ParamSpec] {
        &self.params
    }

    /// The JSON schema advertised to models, as a value. Deterministic:
    /// equal declarations produce identical schemas.
    pub fn schema(&self) -> Value {
        let mut properties = Map::new();
        let mut required = Vec::new();
        for p in &self.params {
            let mut s = p.ty.schema();
            if let Some(desc) = &p.description {
                s["description"] = Value::String(desc.clone());
            }
            properties.insert(p.name.clone(), s);
            if p.required {
                required.push(Value::String(p.name.clone()));
            }
        }
        json!({
            "name": self.name,
            "description": self.description,
            "parameters": {
                "type": "object",
                "properties": properties,
                "required": required,
            }
        })
    }

    /// The schema as compact JSON text.
    pub fn schema_json(&self) -> String {
        self.schema().to_string()
    }
}

/// Why a function call failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CallErrorKind {
    /// The requested function does not exist (hallucinated name).
    NoSuchFunction,
    /// The function exists but was passed parameters that do not.
    UnknownParam,
    /// The arguments are malformed JSON or carry wrong data types.
    Validation,
    /// The function itself failed while executing.
    WrappedCall,
}

/// A failed function call: one taxonomy kind plus human-readable detail the
/// model can act on.
#[derive(Debug, Clone, thiserror::Error)]
#[error("{detail}")]
pub struct CallError {
    pub kind: CallErrorKind,
    pub detail: String,
}

impl CallError {
    fn new(kind: CallErrorKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

/// The set of functions exposed to a model, keyed by exact, case-sensitive
/// name. Registration order is preserved.
#[derive(Debug, Default, Clone)]
pub struct FunctionRegistry {
    functions: IndexMap<String, AIFunction>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_functions(functions: impl IntoIterator<Item = AIFunction>) -> Self {
        let mut registry = Self::new();
        for f in functions {
            registry.register(f);
        }
        registry
    }

    /// Adds a function; re-registering an existing name replaces it.
    pub fn register(&mut self, function: AIFunction) {
        self.functions.insert(function.name.clone(), function);
    }

    pub fn get(&self, name: &str) -> Option<&AIFunction> {
        self.functions.get(name)
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// All registered functions in registration order.
    pub fn functions(&self) -> Vec<AIFunction> {
        self.functions.values().cloned().collect()
    }

    /// Checks a call against the registered schema without running anything.
    ///
    /// Total over arbitrary model output: never panics, never throws; every
    /// failure is one of the [`CallErrorKind`] variants. On success the
    /// returned map contains every required parameter coerced to its type
    /// and optional parameters only where provided.
    pub fn validate_call(&self, call: &FunctionCall) -> Result<ArgMap, CallError> {
        let Some(function) = self.functions.get(call.name()) else {
            return Err(CallError::new(
                CallErrorKind::NoSuchFunction,
                format!("no function named '{}'", call.name()),
            ));
        };
        let parsed: Value = serde_json::from_str(call.arguments()).map_err(|e| {
            CallError::new(
                CallErrorKind::Validation,
                format!("arguments are not valid JSON: {e}"),
            )
        })?;
        let Some(given) = parsed.as_object() else {
            return Err(CallError::new(
                CallErrorKind::Validation,
                format!("arguments must be a JSON object, got {parsed}"),
            ));
        };
        // Unknown keys are reported before per-field type checks.
        for key in given.keys() {
            if !function.params.iter().any(|p| p.name == *key) {
                return Err(CallError::new(
                    CallErrorKind::UnknownParam,
                    format!(
                        "unknown parameter '{key}' for function '{}'",
                        function.name
                    ),
                ));
            }
        }
        let mut validated = ArgMap::new();
        for p in &function.params {
            match given.get(&p.name) {
                None | Some(Value::Null) if !p.required => {}
                None => {
                    return Err(CallError::new(
                        CallErrorKind::Validation,
                        format!("missing required parameter '{}'", p.name),
                    ));
                }
                Some(Value::Null) => {
                    return Err(CallError::new(
                        CallErrorKind::Validation,
                        format!("required parameter '{}' must not be null", p.name),
                    ));
                }
                Some(value) => {
                    let coerced = p
                        .ty
                        .coerce(value, &p.name)
                        .map_err(|detail| CallError::new(CallErrorKind::Validation, detail))?;
                    if !coerced.is_null() {
                        validated.insert(p.name.clone(), coerced);
                    }
                }
            }
        }
        Ok(validated)
    }

    /// Validates the call and, if it is well-formed, runs the handler.
    ///
    /// Handler failures (returned errors, panics, timeouts) are captured as
    /// [`CallErrorKind::WrappedCall`] with the failure text. The handler's
    /// return value comes back stringified.
    pub async fn invoke(&self, call: &FunctionCall) -> Result<String, CallError> {
        let args = self.validate_call(call)?;
        let function = self
            .functions
            .get(call.name())
            .expect("validated call names a registered function");
        let work = std::panic::AssertUnwindSafe((function.handler)(args)).catch_unwind();
        let outcome = match function.timeout {
            Some(limit) => match tokio::time::timeout(limit, work).await {
                Ok(outcome) => outcome,
                Err(_) => {
                    return Err(CallError::new(
                        CallErrorKind::WrappedCall,
                        format!("function '{}' timed out after {limit:?}", function.name),
                    ));
                }
            },
            None => work.await,
        };
        match outcome {
            Err(panic) => Err(CallError::new(
                CallErrorKind::WrappedCall,
                format!(
                    "function '{}' panicked: {}",
                    function.name,
                    panic_text(panic.as_ref())
                ),
            )),
            Ok(Err(detail)) => Err(CallError::new(CallErrorKind::WrappedCall, detail)),
            Ok(Ok(Value::String(text))) => Ok(text),
            Ok(Ok(value)) => Ok(value.to_string()),
        }
    }
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}
