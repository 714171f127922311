use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::{step_rng, Decision, Policy, PolicyContext, PolicyError};
use crate::component::ComponentRef;
use crate::episode::{entry_components, ObservationPayload};

/// Behaviour of a [`MockPolicy`]. Scripts past their end repeat the last
/// element.
#[derive(Debug, Clone, PartialEq)]
pub enum MockScript {
    /// Print the entry span's service immediately.
    PrintEntry,
    /// Query the entry span's children on every step.
    TraceEntry,
    /// Seeded random mix of valid calls, bad answers and malformed output.
    Random,
    Steps(Vec<Decision>),
    /// Raw model outputs, parsed as if they came from a remote model.
    Raw(Vec<String>),
}

impl FromStr for MockScript {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "print-entry" => Ok(MockScript::PrintEntry),
            "trace-entry" => Ok(MockScript::TraceEntry),
            "random" => Ok(MockScript::Random),
            other => Err(PolicyError::Config(format!("unknown mock script `{other}`"))),
        }
    }
}

impl fmt::Display for MockScript {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MockScript::PrintEntry => f.write_str("print-entry"),
            MockScript::TraceEntry => f.write_str("trace-entry"),
            MockScript::Random => f.write_str("random"),
            MockScript::Steps(s) => write!(f, "steps[{}]", s.len()),
            MockScript::Raw(s) => write!(f, "raw[{}]", s.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockPolicy {
    script: MockScript,
}

impl MockPolicy {
    pub fn new(script: MockScript) -> Self {
        MockPolicy { script }
    }
}

fn nth_or_last<T: Clone>(items: &[T], i: usize) -> Option<T> {
    items.get(i).or_else(|| items.last()).cloned()
}

impl Policy for MockPolicy {
    fn decide(&self, _instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let case = &ctx.path.case;
        let step = ctx.path.steps.len();
        Ok(match &self.script {
            MockScript::PrintEntry => Decision::print(&[ComponentRef::service(&case.entry_span.service)]),
            MockScript::TraceEntry => Decision::trace(case.entry_span.span_id.clone()),
            MockScript::Steps(s) => nth_or_last(s, step).ok_or_else(|| PolicyError::Config("empty mock script".into()))?,
            MockScript::Raw(s) => super::parse_tool_call(&nth_or_last(s, step).unwrap_or_default()),
            MockScript::Random => random_decision(ctx),
        })
    }
}

fn random_decision(ctx: &PolicyContext<'_>) -> Decision {
    let mut rng = step_rng(ctx, 0x6d6f636b);
    let case = &ctx.path.case;
    let mut spans = vec![case.entry_span.span_id.clone()];
    let mut comps = entry_components(case);
    for s in &ctx.path.steps {
        if let ObservationPayload::ChildSpans(o) = &s.observation.payload {
            spans.extend(o.rows.iter().map(|r| r.span_id.clone()));
        }
    }
    comps.extend(ctx.path.mentioned_components());
    let roll: f64 = rng.random();
    if roll < 0.35 {
        let span = if rng.random_bool(0.1) { "no-such-span".to_string() } else { spans[rng.random_range(0..spans.len())].clone() };
        Decision::trace(span)
    } else if roll < 0.6 {
        let c = &comps[rng.random_range(0..comps.len())];
        Decision::metrics(c.id(), case.entry_span.timestamp)
    } else if roll < 0.8 {
        comps.shuffle(&mut rng);
        let k = rng.random_range(0..=comps.len().min(4));
        Decision::print(&comps[..k])
    } else {
        let junk = [
            "I am not sure yet.",
            r#"{"name":"search_traces","arguments":"not-a-map"}"#,
            r#"{"arguments":{}}"#,
            r#"{"name":"search_logs","arguments":{}}"#,
            r#"{"name":"search_fluctuating_metrics","arguments":{"service_name":"x"}}"#,
        ];
        super::parse_tool_call(junk[rng.random_range(0..junk.len())])
    }
}

/// Reads the ground truth: one trace query on the entry span, then prints the
/// labelled component followed by the entry service.
#[derive(Debug, Clone)]
pub struct OraclePolicy {
    truths: BTreeMap<String, ComponentRef>,
}

impl OraclePolicy {
    pub fn new(truths: BTreeMap<String, ComponentRef>) -> Self {
        OraclePolicy { truths }
    }
}

impl Policy for OraclePolicy {
    fn decide(&self, _instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let case = &ctx.path.case;
        if ctx.path.is_empty() && ctx.depth_left > 1 && ctx.allowed.contains(&crate::tools::Action::Trace) {
            return Ok(Decision::trace(case.entry_span.span_id.clone()));
        }
        let mut out: Vec<ComponentRef> = self.truths.get(&case.trace_id).cloned().into_iter().collect();
        let entry = ComponentRef::service(&case.entry_span.service);
        if !out.contains(&entry) {
            out.push(entry);
        }
        Ok(Decision::print(&out))
    }
}

/// Baseline that prints a seeded uniform permutation of every component
/// without exploring.
#[derive(Debug, Clone)]
pub struct UniformRandomPolicy {
    components: Vec<ComponentRef>,
}

impl UniformRandomPolicy {
    pub fn new(components: Vec<ComponentRef>) -> Self {
        UniformRandomPolicy { components }
    }
}

impl Policy for UniformRandomPolicy {
    fn decide(&self, _instruction: &str, ctx: &PolicyContext<'_>) -> Result<Decision, PolicyError> {
        let mut rng = step_rng(ctx, 0x756e6966);
        let mut comps = self.components.clone();
        comps.shuffle(&mut rng);
        Ok(Decision::print(&comps))
    }
}
