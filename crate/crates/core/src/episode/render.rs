//! Instruction text shown to the policy at each step.

use std::fmt::Write as _;

use super::InferencePath;
use crate::tools::schema::{self, Action};

/// Fixed system message for remote models.
pub const SYSTEM_PROMPT: &str = "You are a software operations engineer. Your task is to systematically diagnose and \
identify the root cause of software failures. You have the following tools: search_traces, \
search_fluctuating_metrics, print_results.";

const OPENING: &str = "Please read the following root trace and identify corresponding root cause service.";

const CONTINUE: &str = "Please continue to identify the root cause service. You may explore deeper by using the \
search_traces tool or combine with search_fluctuating_metrics. If you have determined the root cause, call the \
print_results function.";

const FINAL: &str = "You have no exploration budget left. Call the print_results function now with your ranked root causes.";

/// `f(R, A)`: the entry span, every step so far with its observation, and the
/// tools in `allowed`. Pure in its inputs.
pub fn render_instruction(path: &InferencePath, allowed: &[Action]) -> String {
    let e = &path.case.entry_span;
    let mut out = String::new();
    let _ = writeln!(out, "{OPENING}");
    let _ = writeln!(
        out,
        "timestamp: {}, cmdb_id: {}, span_id: {}, operation: {}, duration: {}, status: {}",
        e.timestamp, e.instance, e.span_id, e.operation, e.duration, e.status
    );
    for s in &path.steps {
        let _ = writeln!(out);
        let _ = writeln!(out, "[{}] {} {}", s.index, s.action, serde_json::Value::Object(s.params.clone()));
        let _ = writeln!(out, "{}", s.observation.text);
    }
    let _ = writeln!(out);
    let only_print = allowed.iter().all(|a| *a == Action::Print);
    let _ = writeln!(out, "{}", if only_print { FINAL } else { CONTINUE });
    let _ = writeln!(out);
    let _ = writeln!(out, "Available tools:");
    for t in schema::tool_definitions(allowed) {
        let _ = writeln!(out, "{}: {}", t.name, t.description);
    }
    out
}
