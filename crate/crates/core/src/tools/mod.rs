//! The actor's data tools: child-span retrieval, fluctuating-metric
//! retrieval and final-answer emission.
//!
//! Tool failures are values, not panics: an episode records them as error
//! observations and carries on.

pub mod schema;

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use crate::component::{ComponentLevel, ComponentRef};
use crate::telemetry::{BaselineReport, ComponentIndex, MetricKey, MetricStore, TraceStore};
pub use schema::{tool_definitions, Action, ToolDefinition};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ToolError {
    #[error("unknown span `{0}`")]
    UnknownSpan(String),
    #[error("unknown component `{0}`")]
    UnknownComponent(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty root cause list")]
    EmptyAnswer,
}

/// One direct child of the queried span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildSpanRow {
    pub timestamp: i64,
    pub span_id: String,
    pub service: String,
    pub instance: String,
    pub node: Option<String>,
    pub operation: String,
    pub duration: u64,
    pub status: i64,
}

impl ChildSpanRow {
    /// Components this row mentions: its service, pod and (if known) node.
    pub fn components(&self) -> impl Iterator<Item = ComponentRef> + '_ {
        [
            ComponentRef::new(ComponentLevel::Service, self.service.clone()).ok(),
            ComponentRef::new(ComponentLevel::Pod, self.instance.clone()).ok(),
            self.node.as_ref().and_then(|n| ComponentRef::new(ComponentLevel::Node, n.clone()).ok()),
        ]
        .into_iter()
        .flatten()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildSpanObservation {
    pub parent_span_id: String,
    pub rows: Vec<ChildSpanRow>,
}

impl ChildSpanObservation {
    pub fn render(&self) -> String {
        if self.rows.is_empty() {
            return format!("span {} has no child spans", self.parent_span_id);
        }
        let mut out = String::from("timestamp | cmdb_id | operation | duration | span_id | service | status\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{} | {} | {} | {} us | {} | {} | {}",
                r.timestamp, r.instance, r.operation, r.duration, r.span_id, r.service, r.status
            );
        }
        out.pop();
        out
    }
}

/// A metric that failed the n-sigma test somewhere in the query window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationRow {
    pub key: MetricKey,
    /// Node hosting the pod, for pod metrics.
    pub host_node: Option<String>,
    pub regular_mean: f64,
    pub regular_std: f64,
    pub current_mean: f64,
    /// `current_mean / regular_mean`; absent when the regular mean is zero.
    pub change: Option<f64>,
    /// Largest |z| in the window; absent (unbounded) when the regular std is zero.
    pub max_abs_z: Option<f64>,
    pub max_abs_deviation: f64,
    pub flagged_points: usize,
}

impl FluctuationRow {
    pub fn label(&self) -> String {
        match &self.host_node {
            Some(n) => format!("{n}.{}", self.key),
            None => self.key.to_string(),
        }
    }

    /// Components this row mentions: the metric's component and its host node.
    pub fn components(&self) -> impl Iterator<Item = ComponentRef> + '_ {
        std::iter::once(self.key.component.clone())
            .chain(self.host_node.as_ref().and_then(|n| ComponentRef::new(ComponentLevel::Node, n.clone()).ok()))
    }

    /// Ranking score: larger is more anomalous, unbounded z first.
    pub fn severity(&self) -> f64 {
        self.max_abs_z.unwrap_or(f64::INFINITY)
    }

    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .severity()
            .total_cmp(&self.severity())
            .then_with(|| other.max_abs_deviation.total_cmp(&self.max_abs_deviation))
            .then_with(|| self.key.cmp(&other.key))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationObservation {
    pub scope: String,
    pub t0: i64,
    pub delta: i64,
    pub n: f64,
    /// Sorted by max |z| descending.
    pub rows: Vec<FluctuationRow>,
}

impl FluctuationObservation {
    pub fn render(&self) -> String {
        if self.rows.is_empty() {
            return format!("no fluctuating metrics for {} within {}s of {}", self.scope, self.delta, self.t0);
        }
        let mut out = String::from("metric | regular_mean | current_mean | change | max_z\n");
        for r in &self.rows {
            let change = r.change.map(|c| format!("x{c:.2}")).unwrap_or_else(|| "n/a".into());
            let z = r.max_abs_z.map(|z| format!("{z:.2}")).unwrap_or_else(|| "inf".into());
            let _ = writeln!(out, "{} | {} | {} | {} | {}", r.label(), fmt_num(r.regular_mean), fmt_num(r.current_mean), change, z);
        }
        out.pop();
        out
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-" { "0".into() } else { s.to_string() }
}

/// A root-cause candidate with optional supporting text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub component: ComponentRef,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub explanation: String,
}

impl Candidate {
    pub fn new(component: ComponentRef) -> Self {
        Self { component, explanation: String::new() }
    }
}

impl From<ComponentRef> for Candidate {
    fn from(c: ComponentRef) -> Self {
        Candidate::new(c)
    }
}

/// Ranked root-cause claim. Duplicates are kept; graders count them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub candidates: Vec<Candidate>,
    pub printed_by_policy: bool,
}

impl FinalAnswer {
    pub fn components(&self) -> impl Iterator<Item = &ComponentRef> {
        self.candidates.iter().map(|c| &c.component)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn render(&self) -> String {
        let parts: Vec<String> = self.candidates.iter().map(|c| c.component.to_json().to_string()).collect();
        format!("root causes: [{}]", parts.join(", "))
    }
}

/// Direct children of `span_id`. The span is resolved inside `trace_hint`
/// first, then across all traces.
pub fn trace_tool(store: &TraceStore, trace_hint: Option<&str>, span_id: &str) -> Result<ChildSpanObservation, ToolError> {
    let trace = store.locate(span_id, trace_hint).ok_or_else(|| ToolError::UnknownSpan(span_id.to_string()))?;
    let rows = trace
        .children_of(span_id)
        .map(|c| ChildSpanRow {
            timestamp: c.timestamp,
            span_id: c.span_id.clone(),
            service: c.service.clone(),
            instance: c.instance.clone(),
            node: c.node.clone(),
            operation: c.operation.clone(),
            duration: c.duration,
            status: c.status,
        })
        .collect();
    Ok(ChildSpanObservation { parent_span_id: span_id.to_string(), rows })
}

/// What a metrics query covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricScope {
    /// A service, pod or node name, expanded through the component index.
    Name(String),
    /// Exactly one component.
    Component(ComponentRef),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsQuery {
    pub scope: MetricScope,
    /// Seconds.
    pub t0: i64,
    /// Half-width of the window, seconds.
    pub delta: i64,
    pub n: f64,
}

/// Metrics of the scoped components with at least one point in
/// `[t0 - delta, t0 + delta]` satisfying `|m(t) - mean| > n * std`
/// (`> 0` when std is zero).
pub fn metrics_tool(
    metrics: &MetricStore,
    baselines: &BaselineReport,
    index: &ComponentIndex,
    query: &MetricsQuery,
) -> Result<FluctuationObservation, ToolError> {
    if query.delta <= 0 {
        return Err(ToolError::InvalidArgument(format!("delta must be positive, got {}", query.delta)));
    }
    if !(query.n > 0.0) || !query.n.is_finite() {
        return Err(ToolError::InvalidArgument(format!("n must be positive, got {}", query.n)));
    }
    let (scope_label, components): (String, Vec<ComponentRef>) = match &query.scope {
        MetricScope::Name(name) => {
            let comps = index.expand_scope(name).ok_or_else(|| ToolError::UnknownComponent(name.clone()))?;
            (name.clone(), comps)
        }
        MetricScope::Component(c) => {
            if !index.has(c) && metrics.series_for(c).next().is_none() {
                return Err(ToolError::UnknownComponent(c.to_string()));
            }
            (c.to_string(), vec![c.clone()])
        }
    };
    let components: BTreeSet<ComponentRef> = components.into_iter().collect();
    let (lo, hi) = (query.t0 - query.delta, query.t0 + query.delta);

    let mut rows = Vec::new();
    for comp in &components {
        for series in metrics.series_for(comp) {
            let Some(base) = baselines.get(&series.key) else { continue };
            let pts = series.window(lo, hi);
            if pts.is_empty() {
                continue;
            }
            let threshold = query.n * base.std;
            let mut flagged = 0;
            let mut max_dev: f64 = 0.0;
            for &(_, v) in pts {
                let dev = (v - base.mean).abs();
                if dev > threshold {
                    flagged += 1;
                }
                max_dev = max_dev.max(dev);
            }
            if flagged == 0 {
                continue;
            }
            let current_mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
            let host_node = match comp.level() {
                ComponentLevel::Pod => index.node_of_pod(comp.id()).map(str::to_string),
                _ => None,
            };
            rows.push(FluctuationRow {
                key: series.key.clone(),
                host_node,
                regular_mean: base.mean,
                regular_std: base.std,
                current_mean,
                change: (base.mean != 0.0).then(|| current_mean / base.mean),
                max_abs_z: (base.std > 0.0).then(|| max_dev / base.std),
                max_abs_deviation: max_dev,
                flagged_points: flagged,
            });
        }
    }
    rows.sort_by(FluctuationRow::rank_cmp);
    Ok(FluctuationObservation { scope: scope_label, t0: query.t0, delta: query.delta, n: query.n, rows })
}

/// Wraps the policy's ranked list as a final answer, unchanged.
pub fn print_results(candidates: Vec<Candidate>) -> Result<FinalAnswer, ToolError> {
    if candidates.is_empty() {
        return Err(ToolError::EmptyAnswer);
    }
    Ok(FinalAnswer { candidates, printed_by_policy: true })
}
