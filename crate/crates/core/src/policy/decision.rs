//! Policy decisions and the tool-call parser that produces them from raw
//! model output.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{json, Map, Value};

use crate::component::{ComponentLevel, ComponentRef};
use crate::tools::schema::{self, Action};

/// The action a decision names. Unknown tool names are preserved verbatim so
/// that graders can see them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum DecidedAction {
    Known(Action),
    Unknown(String),
}

impl DecidedAction {
    pub fn known(&self) -> Option<Action> {
        match self {
            DecidedAction::Known(a) => Some(*a),
            DecidedAction::Unknown(_) => None,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            DecidedAction::Known(a) => a.tool_name(),
            DecidedAction::Unknown(s) => s,
        }
    }
}

impl From<&str> for DecidedAction {
    fn from(s: &str) -> Self {
        Action::from_tool_name(s).map(DecidedAction::Known).unwrap_or_else(|| DecidedAction::Unknown(s.to_string()))
    }
}

impl fmt::Display for DecidedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl Serialize for DecidedAction {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.label())
    }
}

impl<'de> Deserialize<'de> for DecidedAction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(DecidedAction::from(s.as_str()))
    }
}

/// One schema problem found in a policy output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum Violation {
    NotStructured,
    NoToolCall,
    MissingName,
    MissingArguments,
    ArgumentsNotMap,
    UnknownTool(String),
    MissingParameter(String),
    ExtraParameter(String),
    ParameterType(String),
    /// Index of the offending element in `root_causes`.
    BadRootCause(usize),
    /// Number of tool calls after the first, which are ignored.
    ExtraToolCalls(usize),
}

impl Violation {
    /// Share of a decision's format credit this violation removes.
    pub fn weight(&self) -> f64 {
        match self {
            Violation::NotStructured
            | Violation::NoToolCall
            | Violation::MissingName
            | Violation::MissingArguments
            | Violation::ArgumentsNotMap
            | Violation::UnknownTool(_) => 1.0,
            Violation::MissingParameter(_) | Violation::ParameterType(_) | Violation::BadRootCause(_) => 0.5,
            Violation::ExtraParameter(_) | Violation::ExtraToolCalls(_) => 0.25,
        }
    }

    /// Whether the decision can still be executed. Only surplus tool calls
    /// leave the first call usable.
    pub fn is_blocking(&self) -> bool {
        !matches!(self, Violation::ExtraToolCalls(_))
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotStructured => f.write_str("response is not a structured document"),
            Violation::NoToolCall => f.write_str("no tool call in response"),
            Violation::MissingName => f.write_str("missing name field"),
            Violation::MissingArguments => f.write_str("missing arguments field"),
            Violation::ArgumentsNotMap => f.write_str("arguments not a structured map"),
            Violation::UnknownTool(n) => write!(f, "unknown tool `{n}`"),
            Violation::MissingParameter(p) => write!(f, "missing parameter `{p}`"),
            Violation::ExtraParameter(p) => write!(f, "unexpected parameter `{p}`"),
            Violation::ParameterType(p) => write!(f, "parameter `{p}` has the wrong type"),
            Violation::BadRootCause(i) => write!(f, "root cause element {i} missing node/service/pod attribute"),
            Violation::ExtraToolCalls(n) => write!(f, "{n} additional tool call(s) ignored"),
        }
    }
}

/// `Decide(I) -> (action, params)`, plus the raw text it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: DecidedAction,
    pub params: Map<String, Value>,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

impl Decision {
    /// A decision built by code rather than parsed. The raw output is the
    /// canonical wire form of the call, and params are schema-checked.
    pub fn call(action: Action, params: Map<String, Value>) -> Self {
        let raw = json!({
            "tool_calls": [{"name": action.tool_name(), "arguments": Value::Object(params.clone()).to_string()}]
        })
        .to_string();
        let violations = validate_params(action, &params);
        Decision { action: DecidedAction::Known(action), params, raw_output: raw, violations }
    }

    pub fn trace(span_id: impl Into<String>) -> Self {
        let mut p = Map::new();
        p.insert(schema::PARENT_SPAN_ID.into(), Value::String(span_id.into()));
        Decision::call(Action::Trace, p)
    }

    pub fn metrics(service_name: impl Into<String>, timestamp_ms: i64) -> Self {
        let mut p = Map::new();
        p.insert(schema::SERVICE_NAME.into(), Value::String(service_name.into()));
        p.insert(schema::TIMESTAMP.into(), Value::from(timestamp_ms));
        Decision::call(Action::Metrics, p)
    }

    pub fn print<'a>(candidates: impl IntoIterator<Item = &'a ComponentRef>) -> Self {
        let list: Vec<Value> = candidates.into_iter().map(ComponentRef::to_json).collect();
        let mut p = Map::new();
        p.insert(schema::ROOT_CAUSES.into(), Value::Array(list));
        Decision::call(Action::Print, p)
    }

    /// Executable: a known action and no blocking violation.
    pub fn is_executable(&self) -> bool {
        self.action.known().is_some() && self.violations.iter().all(|v| !v.is_blocking())
    }

    pub fn str_param(&self, name: &str) -> Option<&str> {
        self.params.get(name).and_then(Value::as_str)
    }

    pub fn int_param(&self, name: &str) -> Option<i64> {
        self.params.get(name).and_then(Value::as_i64)
    }

    /// Well-formed elements of `root_causes`, in order.
    pub fn root_causes(&self) -> Vec<ComponentRef> {
        self.params
            .get(schema::ROOT_CAUSES)
            .and_then(Value::as_array)
            .map(|items| items.iter().filter_map(root_cause_element).collect())
            .unwrap_or_default()
    }
}

fn root_cause_element(v: &Value) -> Option<ComponentRef> {
    let obj = v.as_object()?;
    if obj.len() != 1 {
        return None;
    }
    let (k, v) = obj.iter().next()?;
    let level: ComponentLevel = k.parse().ok()?;
    ComponentRef::new(level, v.as_str()?).ok()
}

/// Checks `params` against the tool's parameter schema.
pub fn validate_params(action: Action, params: &Map<String, Value>) -> Vec<Violation> {
    let mut out = Vec::new();
    let names = action.parameter_names();
    for k in params.keys() {
        if !names.contains(&k.as_str()) {
            out.push(Violation::ExtraParameter(k.clone()));
        }
    }
    for &name in names {
        let Some(v) = params.get(name) else {
            out.push(Violation::MissingParameter(name.to_string()));
            continue;
        };
        match name {
            schema::PARENT_SPAN_ID | schema::SERVICE_NAME => {
                if v.as_str().is_none_or(str::is_empty) {
                    out.push(Violation::ParameterType(name.to_string()));
                }
            }
            schema::TIMESTAMP => {
                if v.as_i64().is_none_or(|t| t < 0) {
                    out.push(Violation::ParameterType(name.to_string()));
                }
            }
            schema::ROOT_CAUSES => match v.as_array() {
                None => out.push(Violation::ParameterType(name.to_string())),
                Some(items) => {
                    for (i, item) in items.iter().enumerate() {
                        if root_cause_element(item).is_none() {
                            out.push(Violation::BadRootCause(i));
                        }
                    }
                }
            },
            _ => {}
        }
    }
    out
}

fn invalid(raw: &str, action: DecidedAction, violations: Vec<Violation>) -> Decision {
    Decision { action, params: Map::new(), raw_output: raw.to_string(), violations }
}

/// Extracts the first tool call from a model response. Accepts a bare call
/// object (`{"name", "arguments"}`), a response document with `tool_calls`,
/// or a chat-completions style `choices[0].message`. Never fails: problems
/// are reported as violations on the returned decision.
pub fn parse_tool_call(raw: &str) -> Decision {
    let doc = match serde_json::from_str::<Value>(raw) {
        Ok(v) => v,
        Err(_) => match embedded_object(raw) {
            Some(v) => v,
            None => return invalid(raw, DecidedAction::Unknown(String::new()), vec![Violation::NotStructured]),
        },
    };
    let Some(obj) = doc.as_object() else {
        return invalid(raw, DecidedAction::Unknown(String::new()), vec![Violation::NotStructured]);
    };
    let message = obj
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(Value::as_object)
        .unwrap_or(obj);

    let (call, extra) = if let Some(calls) = message.get("tool_calls") {
        match calls.as_array() {
            Some(list) if !list.is_empty() => (list[0].clone(), list.len() - 1),
            _ => return invalid(raw, DecidedAction::Unknown(String::new()), vec![Violation::NoToolCall]),
        }
    } else if message.contains_key("name") || message.contains_key("arguments") {
        (Value::Object(message.clone()), 0)
    } else {
        return invalid(raw, DecidedAction::Unknown(String::new()), vec![Violation::NoToolCall]);
    };

    let call = match call.get("function") {
        Some(f) if f.is_object() => f.clone(),
        _ => call,
    };
    let mut violations = Vec::new();
    let name = call.get("name").and_then(Value::as_str);
    if name.is_none() {
        violations.push(Violation::MissingName);
    }
    let params = match call.get("arguments") {
        None => {
            violations.push(Violation::MissingArguments);
            None
        }
        Some(Value::Object(m)) => Some(m.clone()),
        Some(Value::String(text)) => match serde_json::from_str::<Value>(text) {
            Ok(Value::Object(m)) => Some(m),
            _ => {
                violations.push(Violation::ArgumentsNotMap);
                None
            }
        },
        Some(_) => {
            violations.push(Violation::ArgumentsNotMap);
            None
        }
    };
    let action = DecidedAction::from(name.unwrap_or(""));
    if let (Some(n), DecidedAction::Unknown(_)) = (name, &action) {
        violations.push(Violation::UnknownTool(n.to_string()));
    }
    if let (Some(a), Some(p)) = (action.known(), &params) {
        violations.extend(validate_params(a, p));
    }
    if extra > 0 {
        violations.push(Violation::ExtraToolCalls(extra));
    }
    Decision { action, params: params.unwrap_or_default(), raw_output: raw.to_string(), violations }
}

/// The outermost `{ ... }` span of free text, if it parses.
fn embedded_object(raw: &str) -> Option<Value> {
    let start = raw.find('{')?;
    let end = raw.rfind('}')?;
    if end <= start {
        return None;
    }
    serde_json::from_str::<Value>(&raw[start..=end]).ok().filter(Value::is_object)
}
