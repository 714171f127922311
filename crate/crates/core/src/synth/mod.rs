//! Deterministic synthetic scenarios: normal request traffic over a service
//! topology, one injected fault with its ground-truth label, and metric
//! series that deviate around the fault window.
//!
//! Normal traffic is spread over the whole time range except the fault
//! window; the window only holds the faulty requests. That keeps faulty
//! entries under the 1% that the unlabeled latency baseline trims, so the
//! baseline stays clean without labels.

mod topology;

pub use topology::{
    CallEdge, LogNormal, MetricCatalog, MetricSpec, Preset, ServiceCount, ServiceSpec, Topology, TopologyFile,
};

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{ComponentLevel, ComponentRef};
use crate::telemetry::{write_metrics_csv, write_traces_csv, MetricRow, SpanRecord, TelemetryError};

pub const TRACES_FILE: &str = "traces.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LABEL_FILE: &str = "label.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUITE_SCHEMA: &str = "flforge-suite/1";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultKind {
    LatencyInflation,
    ErrorStatus,
}

/// One injected fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub target: ComponentRef,
    pub kind: FaultKind,
    /// Latency multiplier, or the status code for error faults.
    pub magnitude: f64,
    /// Seconds, inclusive.
    pub window: (i64, i64),
    /// (metric name, deviation in σ) on the target's own series.
    pub correlated_metrics: Vec<(String, f64)>,
}

impl FaultSpec {
    /// ×200 latency or status 500, with the usual metric signature for the
    /// target's level.
    pub fn standard(target: ComponentRef, kind: FaultKind, window: (i64, i64)) -> Self {
        let m = |name: &str, sigma: f64| (name.to_string(), sigma);
        let correlated_metrics = match (target.level(), kind) {
            (ComponentLevel::Node, FaultKind::LatencyInflation) => vec![m("cpu", 12.0), m("io_wait", 9.0)],
            (ComponentLevel::Node, FaultKind::ErrorStatus) => vec![m("pgfault", 12.0)],
            (ComponentLevel::Service, FaultKind::LatencyInflation) => vec![m("latency_p95", 12.0)],
            (ComponentLevel::Service, FaultKind::ErrorStatus) => vec![m("error_rate", 12.0)],
            (ComponentLevel::Pod, FaultKind::LatencyInflation) => vec![m("cpu", 12.0), m("memory", 8.0)],
            (ComponentLevel::Pod, FaultKind::ErrorStatus) => vec![m("memory", 12.0), m("pgfault", 8.0)],
        };
        let magnitude = match kind {
            FaultKind::LatencyInflation => 200.0,
            FaultKind::ErrorStatus => 500.0,
        };
        FaultSpec { target, kind, magnitude, window, correlated_metrics }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Argument(m));
        if self.window.0 >= self.window.1 {
            return bad(format!("fault window ({}, {}) is empty", self.window.0, self.window.1));
        }
        match self.kind {
            FaultKind::LatencyInflation if !(self.magnitude > 1.0 && self.magnitude.is_finite()) => {
                bad(format!("latency multiplier must be > 1, got {}", self.magnitude))
            }
            FaultKind::ErrorStatus if self.magnitude.fract() != 0.0 || !(1.0..1000.0).contains(&self.magnitude) => {
                bad(format!("error status must be an integer code, got {}", self.magnitude))
            }
            _ => Ok(()),
        }
    }

    fn status(&self) -> i64 {
        self.magnitude as i64
    }
}

/// Ground truth for one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub scenario_id: String,
    pub level: ComponentLevel,
    pub target: ComponentRef,
    pub kind: FaultKind,
    pub magnitude: f64,
    pub window: (i64, i64),
}

/// Time layout shared by every scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioClock {
    /// Seconds since the epoch.
    pub start: i64,
    pub duration_secs: i64,
    pub metric_step_secs: i64,
}

impl Default for ScenarioClock {
    fn default() -> Self {
        ScenarioClock { start: 1_647_750_000, duration_secs: 3_600, metric_step_secs: 30 }
    }
}

impl ScenarioClock {
    pub fn end(&self) -> i64 {
        self.start + self.duration_secs
    }
}

/// Generated telemetry and label, held in memory.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub label: ScenarioLabel,
    pub spans: Vec<SpanRecord>,
    pub metrics: Vec<MetricRow>,
    /// Trace ids of the requests that went through the fault.
    pub faulty_traces: Vec<String>,
}

impl Scenario {
    /// Writes `traces.csv`, `metrics.csv` and `label.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(TRACES_FILE);
        write_traces_csv(&self.spans, BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?))?;
        let p = dir.join(METRICS_FILE);
        write_metrics_csv(&self.metrics, BufWriter::new(fs::File::create(&p).map_err(io_err(&p))?))?;
        write_json(&dir.join(LABEL_FILE), &self.label)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), SynthError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| SynthError::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, SynthError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| SynthError::Json { path: path.into(), source })
}

pub fn read_label(path: &Path) -> Result<ScenarioLabel, SynthError> {
    read_json(path)
}

/// Requests routed through the fault: enough to localize, few enough to
/// stay inside the trimmed tail of the latency baseline.
pub fn faulty_request_count(n_requests: usize) -> usize {
    (n_requests / 400).max(1)
}

pub fn gen_scenario(
    topology: &Topology,
    fault: &FaultSpec,
    n_requests: usize,
    seed: u64,
) -> Result<Scenario, SynthError> {
    gen_scenario_with(topology, fault, n_requests, seed, &ScenarioClock::default(), "scenario")
}

pub fn gen_scenario_with(
    topology: &Topology,
    fault: &FaultSpec,
    n_requests: usize,
    seed: u64,
    clock: &ScenarioClock,
    scenario_id: &str,
) -> Result<Scenario, SynthError> {
    topology.validate()?;
    fault.validate()?;
    if !topology.contains(&fault.target) {
        return Err(SynthError::Argument(format!("fault target {} is not in the topology", fault.target)));
    }
    if fault.window.0 < clock.start || fault.window.1 > clock.end() {
        return Err(SynthError::Argument(format!(
            "fault window ({}, {}) lies outside the scenario range ({}, {})",
            fault.window.0,
            fault.window.1,
            clock.start,
            clock.end()
        )));
    }
    let n_faulty = faulty_request_count(n_requests);
    if n_requests <= n_faulty {
        return Err(SynthError::Argument(format!("need more than {n_faulty} requests, got {n_requests}")));
    }
    if clock.metric_step_secs <= 0 {
        return Err(SynthError::Argument("metric step must be positive".into()));
    }
    let outside_ms = (clock.duration_secs - (fault.window.1 - fault.window.0 + 1)) * 1000;
    if outside_ms <= 0 {
        return Err(SynthError::Argument("fault window leaves no room for normal traffic".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // (timestamp ms, faulty) per request, in time order.
    let mut requests: Vec<(i64, bool)> = Vec::with_capacity(n_requests);
    for _ in 0..n_requests - n_faulty {
        let mut t = clock.start * 1000 + rng.random_range(0..outside_ms);
        if t >= fault.window.0 * 1000 {
            t += (fault.window.1 - fault.window.0 + 1) * 1000;
        }
        requests.push((t, false));
    }
    let window_ms = (fault.window.1 - fault.window.0 + 1) * 1000;
    for _ in 0..n_faulty {
        requests.push((fault.window.0 * 1000 + rng.random_range(0..window_ms), true));
    }
    requests.sort_by_key(|&(t, _)| t);

    let mut traffic = Traffic::new(topology, fault, &mut rng);
    let mut faulty_traces = Vec::new();
    for (t, faulty) in requests {
        let id = traffic.request(t, faulty);
        if faulty {
            faulty_traces.push(id);
        }
    }
    let spans = traffic.spans;
    let metrics = gen_metrics(topology, fault, clock, &mut rng);
    let label = ScenarioLabel {
        scenario_id: scenario_id.to_string(),
        level: fault.target.level(),
        target: fault.target.clone(),
        kind: fault.kind,
        magnitude: fault.magnitude,
        window: fault.window,
    };
    Ok(Scenario { label, spans, metrics, faulty_traces })
}

fn sample_us(d: &LogNormal, rng: &mut ChaCha8Rng) -> u64 {
    let z: f64 = StandardNormal.sample(rng);
    (d.mu + d.sigma * z).exp().round().max(1.0) as u64
}

/// Span emitter for one scenario.
struct Traffic<'a> {
    topology: &'a Topology,
    fault: &'a FaultSpec,
    /// Extra self time for a latency-faulty span, µs.
    extra_us: u64,
    rng: &'a mut ChaCha8Rng,
    spans: Vec<SpanRecord>,
}

/// How a faulty request is steered to the target.
struct Route<'a> {
    /// Edge to take out of each service on the way (caller → edge).
    edges: Vec<&'a CallEdge>,
    /// Service and pod the request must land on, for pod/node targets.
    pod: Option<(&'a str, &'a str)>,
}

impl<'a> Traffic<'a> {
    fn new(topology: &'a Topology, fault: &'a FaultSpec, rng: &'a mut ChaCha8Rng) -> Self {
        let extra_us = match fault.kind {
            FaultKind::LatencyInflation => ((fault.magnitude - 1.0) * topology.expected_entry_duration()).round() as u64,
            FaultKind::ErrorStatus => 0,
        };
        Traffic { topology, fault, extra_us, rng, spans: Vec::new() }
    }

    fn route(&mut self) -> Route<'a> {
        let t = self.topology;
        let pod: Option<(&'a str, &'a str)> = match self.fault.target.level() {
            ComponentLevel::Service => None,
            ComponentLevel::Pod => {
                let pod = t.pod_node.get_key_value(self.fault.target.id()).expect("target checked").0.as_str();
                Some((t.service_of_pod(pod).expect("every pod has a service"), pod))
            }
            ComponentLevel::Node => {
                let on_node: Vec<&'a str> = t
                    .pod_node
                    .iter()
                    .filter(|(_, n)| n.as_str() == self.fault.target.id())
                    .map(|(p, _)| p.as_str())
                    .collect();
                let pod = *on_node.choose(self.rng).expect("a node in the topology hosts at least one pod");
                Some((t.service_of_pod(pod).expect("every pod has a service"), pod))
            }
        };
        let service = pod.map_or(self.fault.target.id(), |(s, _)| s);
        let edges = t.route_to(service).expect("validated topologies reach every service");
        Route { edges, pod }
    }

    fn hit(&self, service: &str, pod: &str) -> bool {
        let target = &self.fault.target;
        match target.level() {
            ComponentLevel::Service => service == target.id(),
            ComponentLevel::Pod => pod == target.id(),
            ComponentLevel::Node => self.topology.pod_node.get(pod).is_some_and(|n| n == target.id()),
        }
    }

    fn hex_id(&mut self) -> String {
        format!("{:016x}", self.rng.random::<u64>())
    }

    /// Emits one request; returns its trace id.
    fn request(&mut self, timestamp_ms: i64, faulty: bool) -> String {
        let trace_id = format!("{}{}", self.hex_id(), self.hex_id());
        let route = if faulty { Some(self.route()) } else { None };
        let t = self.topology;
        let call = Call {
            service: &t.entry_service,
            operation: &t.entry_operation,
            latency: t.entry_latency,
            protocol: "http",
        };
        self.span(&trace_id, None, call, timestamp_ms, route.as_ref());
        trace_id
    }

    /// Emits a span and its subtree; returns (duration µs, status).
    fn span(&mut self, trace_id: &str, parent: Option<&str>, call: Call<'a>, ts_ms: i64, route: Option<&Route<'a>>) -> (u64, i64) {
        let t = self.topology;
        let spec = t.service(call.service).expect("edges name known services");
        let pod: &str = match route.and_then(|r| r.pod) {
            Some((s, p)) if s == call.service => p,
            _ => spec.pods.choose(self.rng).expect("services have pods"),
        };
        let ok = if call.protocol == "http" { 200 } else { 0 };
        let faulty_here = route.is_some() && self.hit(call.service, pod);
        let mut self_us = sample_us(&call.latency, self.rng);
        let mut status = ok;
        if faulty_here {
            match self.fault.kind {
                FaultKind::LatencyInflation => self_us += self.extra_us,
                FaultKind::ErrorStatus => status = self.fault.status(),
            }
        }
        let span_id = self.hex_id();
        let index = self.spans.len();
        self.spans.push(SpanRecord {
            trace_id: trace_id.to_string(),
            span_id: span_id.clone(),
            parent_span_id: parent.map(str::to_string),
            timestamp: ts_ms,
            duration: 0,
            service: call.service.to_string(),
            instance: pod.to_string(),
            node: t.pod_node.get(pod).cloned(),
            operation: call.operation.to_string(),
            status: 0,
            protocol: call.protocol.to_string(),
        });
        // Half the own work happens before the first downstream call.
        let mut elapsed = self_us / 2;
        for e in t.calls_from(call.service) {
            let coin = self.rng.random_bool(e.probability);
            let forced = route.is_some_and(|r| r.edges.iter().any(|f| std::ptr::eq(*f, e)));
            if !(coin || forced) {
                continue;
            }
            let child = Call { service: &e.callee, operation: &e.operation, latency: e.latency, protocol: "grpc" };
            let (d, s) = self.span(trace_id, Some(&span_id), child, ts_ms + (elapsed / 1000) as i64, route);
            elapsed += d;
            if s != 0 && status == ok {
                status = s;
            }
        }
        let duration = elapsed + (self_us - self_us / 2);
        let rec = &mut self.spans[index];
        rec.duration = duration;
        rec.status = status;
        (duration, status)
    }
}

#[derive(Clone, Copy)]
struct Call<'a> {
    service: &'a str,
    operation: &'a str,
    latency: LogNormal,
    protocol: &'static str,
}

fn gen_metrics(topology: &Topology, fault: &FaultSpec, clock: &ScenarioClock, rng: &mut ChaCha8Rng) -> Vec<MetricRow> {
    let grid: Vec<i64> = (clock.start..=clock.end()).step_by(clock.metric_step_secs as usize).collect();
    let in_window = |t: i64| t >= fault.window.0 && t <= fault.window.1;
    let mut rows = Vec::new();
    for component in topology.components() {
        for m in topology.metrics.for_level(component.level()) {
            let mean = m.mean * rng.random_range(0.8..1.2);
            let std = m.std * rng.random_range(0.8..1.2);
            let noise = Normal::new(mean, std).expect("catalog std is positive and finite");
            let shift = if component == fault.target {
                fault.correlated_metrics.iter().find(|(n, _)| n == &m.name).map_or(0.0, |(_, s)| s * std)
            } else {
                0.0
            };
            let mut times = grid.clone();
            if shift != 0.0 && !times.iter().any(|&t| in_window(t)) {
                // Window falls between samples: add one inside it.
                times.push(fault.window.0);
                times.sort_unstable();
            }
            for t in times {
                let v = noise.sample(rng) + if in_window(t) { shift } else { 0.0 };
                rows.push(MetricRow {
                    timestamp: t,
                    component_level: component.level(),
                    component_id: component.id().to_string(),
                    metric_name: m.name.clone(),
                    value: v,
                });
            }
        }
    }
    rows
}

/// Suite generation knobs beyond preset, size and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteOptions {
    pub n_requests: usize,
    pub window_secs: i64,
    pub clock: ScenarioClock,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { n_requests: 1_000, window_secs: 60, clock: ScenarioClock::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Directory relative to the manifest.
    pub dir: String,
    pub seed: u64,
    pub label: ScenarioLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub schema: String,
    pub preset: Preset,
    pub seed: u64,
    pub options: SuiteOptions,
    pub scenarios: Vec<ManifestEntry>,
}

pub const FAULT_LEVELS: [ComponentLevel; 3] = [ComponentLevel::Node, ComponentLevel::Service, ComponentLevel::Pod];
pub const FAULT_KINDS: [FaultKind; 2] = [FaultKind::LatencyInflation, FaultKind::ErrorStatus];

/// Level and kind of the `i`-th scenario: levels cycle fastest, so every
/// block of six covers each pair once.
pub fn suite_slot(i: usize) -> (ComponentLevel, FaultKind) {
    (FAULT_LEVELS[i % 3], FAULT_KINDS[(i / 3) % 2])
}

/// Plans a suite: one fault and seed per scenario.
pub fn plan_suite(topology: &Topology, n_scenarios: usize, seed: u64, opts: &SuiteOptions) -> Result<Vec<(String, FaultSpec, u64)>, SynthError> {
    let c = &opts.clock;
    let margin = 600.min(c.duration_secs / 4);
    let latest = c.end() - margin - opts.window_secs;
    if opts.window_secs <= 0 || latest < c.start + margin {
        return Err(SynthError::Argument(format!(
            "a {}s fault window does not fit in a {}s scenario",
            opts.window_secs, c.duration_secs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components = topology.components();
    (0..n_scenarios)
        .map(|i| {
            let (level, kind) = suite_slot(i);
            let pool: Vec<&ComponentRef> = components.iter().filter(|c| c.level() == level).collect();
            let target = (*pool.choose(&mut rng).ok_or_else(|| SynthError::Topology(format!("no {level} components")))?).clone();
            let w0 = rng.random_range(c.start + margin..=latest);
            let fault = FaultSpec::standard(target, kind, (w0, w0 + opts.window_secs));
            Ok((format!("scenario-{i:03}"), fault, rng.random::<u64>()))
        })
        .collect()
}

/// Generates `n_scenarios` scenarios under `dest`, one directory each, plus
/// `manifest.json` listing every label.
pub fn gen_suite(preset: Preset, n_scenarios: usize, seed: u64, dest: &Path) -> Result<SuiteManifest, SynthError> {
    gen_suite_with(preset, n_scenarios, seed, dest, &SuiteOptions::default())
}

pub fn gen_suite_with(preset: Preset, n_scenarios: usize, seed: u64, dest: &Path, opts: &SuiteOptions) -> Result<SuiteManifest, SynthError> {
    let topology = Topology::preset(preset);
    let plan = plan_suite(&topology, n_scenarios, seed, opts)?;
    fs::create_dir_all(dest).map_err(io_err(dest))?;
    let scenarios = plan
        .par_iter()
        .map(|(id, fault, s)| {
            let sc = gen_scenario_with(&topology, fault, opts.n_requests, *s, &opts.clock, id)?;
            sc.write(&dest.join(id))?;
            Ok(ManifestEntry { dir: id.clone(), seed: *s, label: sc.label })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    let manifest = SuiteManifest { schema: SUITE_SCHEMA.into(), preset, seed, options: opts.clone(), scenarios };
    write_json(&dest.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<SuiteManifest, SynthError> {
    let m: SuiteManifest = read_json(&dir.join(MANIFEST_FILE))?;
    if m.schema != SUITE_SCHEMA {
        return Err(SynthError::Argument(format!("unsupported suite schema `{}`", m.schema)));
    }
    Ok(m)
}
