//! The bounded-depth localization loop: render an instruction from the path
//! so far, ask the policy for one tool call, execute it, record the result.

mod render;
mod transcript;

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::component::{ComponentLevel, ComponentRef};
use crate::policy::{DecidedAction, Decision, Policy, PolicyContext, PolicyError, Violation};
use crate::telemetry::{compute_baselines, BaselineReport, ComponentIndex, FailureCase, MetricStore, TelemetryError, TraceStore};
use crate::tools::{
    metrics_tool, print_results, schema, trace_tool, Action, Candidate, ChildSpanObservation, FinalAnswer,
    FluctuationObservation, MetricScope, MetricsQuery,
};

pub use render::{render_instruction, SYSTEM_PROMPT};
pub use transcript::{read_transcript, write_transcript, TranscriptError, TranscriptMeta, TranscriptRecord, TRANSCRIPT_SCHEMA};

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("invalid episode configuration: {0}")]
    InvalidConfig(String),
    #[error("trace `{0}` of the failure case is not in the trace store")]
    UnknownTrace(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
}

/// What the tool returned for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationPayload {
    ChildSpans(ChildSpanObservation),
    Fluctuations(FluctuationObservation),
    Answer(FinalAnswer),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub payload: ObservationPayload,
}

impl Observation {
    fn error(message: String) -> Self {
        Observation { text: format!("error: {message}"), payload: ObservationPayload::Error { message } }
    }

    pub fn is_error(&self) -> bool {
        matches!(self.payload, ObservationPayload::Error { .. })
    }
}

/// One policy decision and what executing it produced. `index` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStep {
    pub index: usize,
    pub action: DecidedAction,
    pub params: Map<String, Value>,
    pub observation: Observation,
    pub policy_raw_output: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// The case plus every step taken on it, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferencePath {
    pub case: FailureCase,
    pub steps: Vec<ActionStep>,
}

impl InferencePath {
    pub fn new(case: FailureCase) -> Self {
        InferencePath { case, steps: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Components appearing in trace rows and fluctuation rows, in first-seen
    /// order with repetitions.
    pub fn mentioned_components(&self) -> Vec<ComponentRef> {
        let mut out = Vec::new();
        for s in &self.steps {
            match &s.observation.payload {
                ObservationPayload::ChildSpans(o) => {
                    for r in &o.rows {
                        out.extend(r.components());
                    }
                }
                ObservationPayload::Fluctuations(o) => {
                    for r in &o.rows {
                        out.extend(r.components());
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Everything the actor has been shown: the entry span's components plus
    /// every mentioned component.
    pub fn observed_components(&self) -> HashSet<ComponentRef> {
        let mut set: HashSet<ComponentRef> = entry_components(&self.case).into_iter().collect();
        set.extend(self.mentioned_components());
        set
    }
}

/// Service, pod and node (when known) of the entry span.
pub fn entry_components(case: &FailureCase) -> Vec<ComponentRef> {
    let e = &case.entry_span;
    let mut out = Vec::new();
    out.extend(ComponentRef::new(ComponentLevel::Service, &e.service).ok());
    out.extend(ComponentRef::new(ComponentLevel::Pod, &e.instance).ok());
    if let Some(n) = &e.node {
        out.extend(ComponentRef::new(ComponentLevel::Node, n).ok());
    }
    out
}

/// Parameters of the metrics tool as exposed to the actor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolConfig {
    /// Deviation threshold in standard deviations.
    pub n: f64,
    /// Half-width of the query window, seconds.
    pub delta: i64,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig { n: 3.0, delta: 60 }
    }
}

/// Telemetry and derived indexes an episode executes tools against.
#[derive(Debug, Clone)]
pub struct Environment {
    pub traces: TraceStore,
    pub metrics: MetricStore,
    pub baselines: BaselineReport,
    pub index: ComponentIndex,
    pub tools: ToolConfig,
}

impl Environment {
    /// Builds baselines over `baseline_window` (seconds), or over the whole
    /// metric time range when `None`.
    pub fn new(
        traces: TraceStore,
        metrics: MetricStore,
        baseline_window: Option<(i64, i64)>,
        tools: ToolConfig,
    ) -> Result<Self, EpisodeError> {
        let window = baseline_window.or_else(|| metrics.time_range()).unwrap_or((0, 0));
        let baselines = compute_baselines(metrics.series(), window)?;
        let index = ComponentIndex::build(&traces, &metrics);
        Ok(Environment { traces, metrics, baselines, index, tools })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Depth budget: number of policy decisions allowed.
    pub d_max: usize,
    /// Upper bound accepted for `d_max`.
    pub hard_cap: usize,
    pub allowed_actions: Vec<Action>,
    /// Transport retries per decision before the episode fails.
    pub transport_retries: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig { d_max: 10, hard_cap: 20, allowed_actions: Action::ALL.to_vec(), transport_retries: 2, seed: 0 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.d_max < 1 || self.d_max > self.hard_cap {
            return Err(EpisodeError::InvalidConfig(format!("d_max must be in 1..={}, got {}", self.hard_cap, self.d_max)));
        }
        if !self.allowed_actions.contains(&Action::Print) {
            return Err(EpisodeError::InvalidConfig("allowed actions must include print_results".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    /// The policy called print_results.
    Printed,
    /// Depth ran out; the answer was assembled from the path.
    Exhausted,
    /// The policy transport failed past its retry budget.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub path: InferencePath,
    pub status: EpisodeStatus,
    pub answer: Option<FinalAnswer>,
    pub depth_used: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl EpisodeResult {
    pub fn printed(&self) -> bool {
        self.status == EpisodeStatus::Printed
    }

    pub fn ranked_components(&self) -> Vec<ComponentRef> {
        self.answer.as_ref().map(|a| a.components().cloned().collect()).unwrap_or_default()
    }
}

fn step_from(path: &InferencePath, decision: Decision, observation: Observation, started: Instant) -> ActionStep {
    ActionStep {
        index: path.steps.len() + 1,
        action: decision.action,
        params: decision.params,
        observation,
        policy_raw_output: decision.raw_output,
        violations: decision.violations,
        wall_time: started.elapsed(),
    }
}

fn execute(env: &Environment, case: &FailureCase, decision: &Decision, allowed: &[Action]) -> Result<Observation, String> {
    let Some(action) = decision.action.known() else {
        return Err(format!("unknown tool `{}`", decision.action));
    };
    if let Some(v) = decision.violations.iter().find(|v| v.is_blocking()) {
        return Err(format!("invalid tool call: {v}"));
    }
    if !allowed.contains(&action) {
        return Err(format!("{action} is not available at this step"));
    }
    match action {
        Action::Trace => {
            let span = decision.str_param(schema::PARENT_SPAN_ID).unwrap_or_default();
            let obs = trace_tool(&env.traces, Some(&case.trace_id), span).map_err(|e| e.to_string())?;
            Ok(Observation { text: obs.render(), payload: ObservationPayload::ChildSpans(obs) })
        }
        Action::Metrics => {
            let name = decision.str_param(schema::SERVICE_NAME).unwrap_or_default();
            let ts = decision.int_param(schema::TIMESTAMP).unwrap_or_default();
            let query = MetricsQuery {
                scope: MetricScope::Name(name.to_string()),
                t0: ts.div_euclid(1000),
                delta: env.tools.delta,
                n: env.tools.n,
            };
            let obs = metrics_tool(&env.metrics, &env.baselines, &env.index, &query).map_err(|e| e.to_string())?;
            Ok(Observation { text: obs.render(), payload: ObservationPayload::Fluctuations(obs) })
        }
        Action::Print => {
            let answer = print_results(decision.root_causes().into_iter().map(Candidate::from).collect()).map_err(|e| e.to_string())?;
            Ok(Observation { text: answer.render(), payload: ObservationPayload::Answer(answer) })
        }
    }
}

/// Runs one episode. Every policy decision consumes one unit of depth,
/// including invalid ones, which are recorded with an error observation.
/// When depth runs out without a print, the answer is assembled from the
/// path by [`force_print`]; it is not recorded as a step.
pub fn run_episode(
    case: &FailureCase,
    policy: &dyn Policy,
    env: &Environment,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, EpisodeError> {
    cfg.validate()?;
    let seed = cfg.seed;
    if env.traces.trace(&case.trace_id).is_none() {
        return Err(EpisodeError::UnknownTrace(case.trace_id.clone()));
    }
    let mut path = InferencePath::new(case.clone());
    let mut depth = cfg.d_max;
    while depth > 0 {
        let instruction = render_instruction(&path, &cfg.allowed_actions);
        let started = Instant::now();
        let decision = {
            let ctx = PolicyContext { path: &path, seed, allowed: &cfg.allowed_actions, depth_left: depth };
            let mut attempt = 0;
            loop {
                match policy.decide(&instruction, &ctx) {
                    Ok(d) => break Ok(d),
                    Err(PolicyError::Transport { retryable: true, .. }) if attempt < cfg.transport_retries => attempt += 1,
                    Err(e) => break Err(e),
                }
            }
        };
        let decision = match decision {
            Ok(d) => d,
            Err(e) => {
                let depth_used = path.steps.len();
                return Ok(EpisodeResult {
                    path,
                    status: EpisodeStatus::Failed,
                    answer: None,
                    depth_used,
                    seed,
                    failure: Some(e.to_string()),
                });
            }
        };
        depth -= 1;
        let observation = execute(env, case, &decision, &cfg.allowed_actions).unwrap_or_else(Observation::error);
        let answer = match &observation.payload {
            ObservationPayload::Answer(a) => Some(a.clone()),
            _ => None,
        };
        path.steps.push(step_from(&path, decision, observation, started));
        if let Some(answer) = answer {
            let depth_used = path.steps.len();
            return Ok(EpisodeResult { path, status: EpisodeStatus::Printed, answer: Some(answer), depth_used, seed, failure: None });
        }
    }
    let depth_used = path.steps.len();
    let answer = force_print(&path);
    Ok(EpisodeResult { path, status: EpisodeStatus::Exhausted, answer: Some(answer), depth_used, seed, failure: None })
}

/// Best-effort ranking from what the path surfaced: fluctuating components
/// first (by severity, a metric's own component ahead of its host node),
/// then span components with the latest, slowest spans first, then the entry
/// service if still missing. Never empty.
pub fn force_print(path: &InferencePath) -> FinalAnswer {
    let mut best: BTreeMap<ComponentRef, RankKey> = BTreeMap::new();
    let mut bump = |c: ComponentRef, key: RankKey| {
        let e = best.entry(c).or_insert(key);
        if key.cmp(e).is_gt() {
            *e = key;
        }
    };
    for s in &path.steps {
        match &s.observation.payload {
            ObservationPayload::ChildSpans(o) => {
                for r in &o.rows {
                    for c in r.components() {
                        bump(c, RankKey { fluctuating: false, severity: 0.0, own: true, step: s.index, duration: r.duration });
                    }
                }
            }
            ObservationPayload::Fluctuations(o) => {
                for r in &o.rows {
                    for c in r.components() {
                        let own = c == r.key.component;
                        bump(c, RankKey { fluctuating: true, severity: r.severity(), own, step: s.index, duration: 0 });
                    }
                }
            }
            _ => {}
        }
    }
    let mut ranked: Vec<(ComponentRef, RankKey)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut out: Vec<ComponentRef> = ranked.into_iter().map(|(c, _)| c).collect();
    let entry = ComponentRef::service(&path.case.entry_span.service);
    if !out.contains(&entry) {
        out.push(entry);
    }
    FinalAnswer { candidates: out.into_iter().map(Candidate::from).collect(), printed_by_policy: false }
}

/// Ordering key for forced answers; greater ranks earlier.
#[derive(Debug, Clone, Copy)]
struct RankKey {
    fluctuating: bool,
    severity: f64,
    own: bool,
    step: usize,
    duration: u64,
}

impl RankKey {
    fn cmp(&self, o: &Self) -> std::cmp::Ordering {
        self.fluctuating
            .cmp(&o.fluctuating)
            .then(self.severity.total_cmp(&o.severity))
            .then(self.own.cmp(&o.own))
            .then(self.step.cmp(&o.step))
            .then(self.duration.cmp(&o.duration))
    }
}

/// Rollout seeds are `cfg.seed + rollout_index`.
pub fn rollout_seed(base_seed: u64, rollout: usize) -> u64 {
    base_seed.wrapping_add(rollout as u64)
}

/// Runs `k` rollouts per case on a pool of `jobs` threads. Results keep
/// case order and rollout order regardless of scheduling.
pub fn run_batch(
    cases: &[FailureCase],
    policy: &dyn Policy,
    env: &Environment,
    cfg: &EpisodeConfig,
    k: usize,
    jobs: usize,
) -> Result<Vec<Vec<EpisodeResult>>, EpisodeError> {
    cfg.validate()?;
    if k == 0 {
        return Err(EpisodeError::InvalidConfig("rollouts per case must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| EpisodeError::InvalidConfig(e.to_string()))?;
    let work: Vec<(usize, usize)> = (0..cases.len()).flat_map(|c| (0..k).map(move |r| (c, r))).collect();
    let flat: Vec<Result<EpisodeResult, EpisodeError>> = pool.install(|| {
        work.par_iter()
            .map(|&(c, r)| {
                let cfg = EpisodeConfig { seed: rollout_seed(cfg.seed, r), ..cfg.clone() };
                run_episode(&cases[c], policy, env, &cfg)
            })
            .collect()
    });
    let mut out: Vec<Vec<EpisodeResult>> = (0..cases.len()).map(|_| Vec::with_capacity(k)).collect();
    for ((c, _), res) in work.into_iter().zip(flat) {
        out[c].push(res?);
    }
    Ok(out)
}
