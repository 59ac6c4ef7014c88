#![no_main]

//! Function-call validation is total over model output: any (name, arguments)
//! pair maps to validated arguments or a typed error, never a crash, and
//! validated arguments always re-validate.
//!
//! Input layout: bytes up to the first zero byte are the function name, the
//! rest is the raw argument text.

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;

use crab::{AIFunction, FunctionCall, FunctionRegistry, ParamSpec, ParamType};

fn registry() -> &'static FunctionRegistry {
    static REGISTRY: OnceLock<FunctionRegistry> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let get_weather = AIFunction::new(
            "get_weather",
            "Get the weather in a given location.",
            vec![
                ParamSpec::new("loc", ParamType::String).describe("The desired city"),
                ParamSpec::new(
                    "unit",
                    ParamType::Enum(vec!["fahrenheit".into(), "celsius".into()]),
                ),
                ParamSpec::new("days", ParamType::Optional(Box::new(ParamType::Integer))),
            ],
            |_| async { Ok(serde_json::Value::Null) },
        )
        .unwrap();
        FunctionRegistry::from_functions([get_weather])
    })
}

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let (name, args) = (&data[..split], data.get(split + 1..).unwrap_or_default());
    let (Ok(name), Ok(args)) = (std::str::from_utf8(name), std::str::from_utf8(args)) else {
        return;
    };
    let Ok(call) = FunctionCall::new(name, args) else {
        return;
    };
    if let Ok(validated) = registry().validate_call(&call) {
        let echoed = serde_json::to_string(&serde_json::Value::Object(validated)).unwrap();
        let replay = FunctionCall::new(call.name(), echoed).unwrap();
        assert!(
            registry().validate_call(&replay).is_ok(),
            "validated arguments failed re-validation"
        );
    }
});
