//! Canonical tool names, descriptions and parameter schemas shared by the
//! instruction renderer, the policies and the remote wire protocol.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SEARCH_TRACES: &str = "search_traces";
pub const SEARCH_FLUCTUATING_METRICS: &str = "search_fluctuating_metrics";
pub const PRINT_RESULTS: &str = "print_results";

pub const PARENT_SPAN_ID: &str = "parent_span_id";
pub const SERVICE_NAME: &str = "service_name";
pub const TIMESTAMP: &str = "timestamp";
pub const ROOT_CAUSES: &str = "root_causes";

/// The three actions available to the actor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Trace,
    Metrics,
    Print,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Trace, Action::Metrics, Action::Print];

    pub fn tool_name(self) -> &'static str {
        match self {
            Action::Trace => SEARCH_TRACES,
            Action::Metrics => SEARCH_FLUCTUATING_METRICS,
            Action::Print => PRINT_RESULTS,
        }
    }

    pub fn from_tool_name(name: &str) -> Option<Action> {
        match name {
            SEARCH_TRACES => Some(Action::Trace),
            SEARCH_FLUCTUATING_METRICS => Some(Action::Metrics),
            PRINT_RESULTS => Some(Action::Print),
            _ => None,
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Action::Print => "report candidate root causes (node/service/pod) with reasoning.",
            Action::Trace => "retrieve child spans of a given span_id.",
            Action::Metrics => "retrieve anomalous metrics around a given service_name and timestamp.",
        }
    }

    /// JSON schema of the tool arguments.
    pub fn parameters_schema(self) -> Value {
        match self {
            Action::Trace => json!({
                "type": "object",
                "properties": {
                    PARENT_SPAN_ID: {"type": "string", "description": "span whose direct children are returned"}
                },
                "required": [PARENT_SPAN_ID],
                "additionalProperties": false
            }),
            Action::Metrics => json!({
                "type": "object",
                "properties": {
                    SERVICE_NAME: {"type": "string", "description": "service, pod or node to inspect"},
                    TIMESTAMP: {"type": "integer", "description": "failure time in milliseconds since the epoch"}
                },
                "required": [SERVICE_NAME, TIMESTAMP],
                "additionalProperties": false
            }),
            Action::Print => json!({
                "type": "object",
                "properties": {
                    ROOT_CAUSES: {
                        "type": "array",
                        "description": "ranked root causes, most likely first",
                        "items": {
                            "type": "object",
                            "properties": {
                                "node": {"type": "string"},
                                "service": {"type": "string"},
                                "pod": {"type": "string"}
                            },
                            "minProperties": 1,
                            "maxProperties": 1,
                            "additionalProperties": false
                        }
                    }
                },
                "required": [ROOT_CAUSES],
                "additionalProperties": false
            }),
        }
    }

    /// Parameter names and whether each is required.
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            Action::Trace => &[PARENT_SPAN_ID],
            Action::Metrics => &[SERVICE_NAME, TIMESTAMP],
            Action::Print => &[ROOT_CAUSES],
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tool_name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trace" => Ok(Action::Trace),
            "metrics" => Ok(Action::Metrics),
            "print" => Ok(Action::Print),
            other => Action::from_tool_name(other).ok_or_else(|| format!("unknown action `{other}`")),
        }
    }
}

/// A tool as advertised to a remote model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDefinition {
    pub name: String,
    pub description: String,
    pub parameters: Value,
}

/// Definitions for `allowed`, in the order print, trace, metrics.
pub fn tool_definitions(allowed: &[Action]) -> Vec<ToolDefinition> {
    [Action::Print, Action::Trace, Action::Metrics]
        .into_iter()
        .filter(|a| allowed.contains(a))
        .map(|a| ToolDefinition {
            name: a.tool_name().to_string(),
            description: a.description().to_string(),
            parameters: a.parameters_schema(),
        })
        .collect()
}
