use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{build_trace_graph, SpanRecord, TraceStore};

pub const DEFAULT_OK_STATUSES: [i64; 2] = [0, 200];

/// Why a request was flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trigger {
    /// Entry duration over the baseline mean exceeded the factor.
    LatencyExceeded { ratio: f64 },
    AbnormalStatus { status: i64 },
}

/// An anomalous request selected for localization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub trace_id: String,
    pub entry_span: SpanRecord,
    pub trigger: Trigger,
    /// Seconds, inclusive; contains the entry span timestamp.
    pub window: (i64, i64),
}

impl FailureCase {
    pub fn id(&self) -> &str {
        &self.trace_id
    }
}

/// Entry-span latency statistics for one (service, operation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBaseline {
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

pub type LatencyBaselines = BTreeMap<(String, String), LatencyBaseline>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    pub factor: f64,
    pub ok_statuses: BTreeSet<i64>,
    /// Half-width of the failure window around the entry timestamp, seconds.
    pub window_half_width: i64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { factor: 100.0, ok_statuses: DEFAULT_OK_STATUSES.into_iter().collect(), window_half_width: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBaselineConfig {
    /// Fraction of the slowest entry spans dropped per (service, operation).
    pub trim_fraction: f64,
    /// Re-estimation rounds that exclude traces flagged by the previous
    /// estimate.
    pub refine_iterations: usize,
}

impl Default for LatencyBaselineConfig {
    fn default() -> Self {
        Self { trim_fraction: 0.01, refine_iterations: 1 }
    }
}

fn entry_of<'a>(store: &'a TraceStore, trace_id: &str) -> Option<&'a SpanRecord> {
    let mut roots = store.trace(trace_id)?.entry_spans();
    let first = roots.next()?;
    roots.next().is_none().then_some(first)
}

fn trimmed_stats(mut durations: Vec<f64>, trim_fraction: f64) -> Option<LatencyBaseline> {
    if durations.is_empty() {
        return None;
    }
    durations.sort_by(f64::total_cmp);
    let n = durations.len();
    let drop = ((n as f64 * trim_fraction).ceil() as usize).min(n - 1);
    let kept = &durations[..n - drop];
    let mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let var = kept.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / kept.len() as f64;
    Some(LatencyBaseline { mean, std: var.sqrt(), sample_count: kept.len() })
}

/// Estimates the normal entry latency per (service, operation) without
/// labels: OK-status entry spans, slowest `trim_fraction` dropped, then
/// re-estimated after excluding traces the previous estimate flags.
pub fn entry_latency_baselines(store: &TraceStore, cfg: &LatencyBaselineConfig, detect: &DetectConfig) -> LatencyBaselines {
    let mut entries: BTreeMap<(String, String), Vec<(&str, f64)>> = BTreeMap::new();
    for (trace_id, _) in store.traces() {
        if let Some(e) = entry_of(store, trace_id) {
            if detect.ok_statuses.contains(&e.status) {
                entries.entry((e.service.clone(), e.operation.clone())).or_default().push((trace_id, e.duration as f64));
            }
        }
    }
    let estimate = |excluded: &HashSet<&str>| -> LatencyBaselines {
        entries
            .iter()
            .filter_map(|(k, v)| {
                let durations: Vec<f64> = v.iter().filter(|(t, _)| !excluded.contains(t)).map(|&(_, d)| d).collect();
                trimmed_stats(durations, cfg.trim_fraction).map(|b| (k.clone(), b))
            })
            .collect()
    };
    let mut excluded: HashSet<&str> = HashSet::new();
    let mut baselines = estimate(&excluded);
    for _ in 0..cfg.refine_iterations {
        let before = excluded.len();
        for (k, v) in &entries {
            if let Some(b) = baselines.get(k) {
                for &(t, d) in v {
                    if d > detect.factor * b.mean {
                        excluded.insert(t);
                    }
                }
            }
        }
        if excluded.len() == before {
            break;
        }
        baselines = estimate(&excluded);
    }
    baselines
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub cases: Vec<FailureCase>,
    /// OK-status traces whose entry (service, operation) has no baseline.
    pub unclassifiable: Vec<String>,
    /// Traces whose span graph is malformed, with the error text.
    pub malformed: Vec<(String, String)>,
}

/// Flags traces whose entry span is slower than `factor` times its baseline
/// mean (strictly) or carries a status outside `ok_statuses`.
pub fn detect_anomalous_traces(store: &TraceStore, baselines: &LatencyBaselines, cfg: &DetectConfig) -> DetectionReport {
    let mut report = DetectionReport::default();
    for (trace_id, _) in store.traces() {
        let graph = match build_trace_graph(store, trace_id) {
            Ok(g) => g,
            Err(e) => {
                report.malformed.push((trace_id.to_string(), e.to_string()));
                continue;
            }
        };
        let entry = graph.entry();
        let trigger = if !cfg.ok_statuses.contains(&entry.status) {
            Some(Trigger::AbnormalStatus { status: entry.status })
        } else {
            match baselines.get(&(entry.service.clone(), entry.operation.clone())) {
                Some(b) if b.mean > 0.0 => {
                    let ratio = entry.duration as f64 / b.mean;
                    (entry.duration as f64 > cfg.factor * b.mean).then_some(Trigger::LatencyExceeded { ratio })
                }
                _ => {
                    report.unclassifiable.push(trace_id.to_string());
                    None
                }
            }
        };
        if let Some(trigger) = trigger {
            let t = entry.timestamp_secs();
            report.cases.push(FailureCase {
                trace_id: trace_id.to_string(),
                entry_span: entry.clone(),
                trigger,
                window: (t - cfg.window_half_width, t + cfg.window_half_width),
            });
        }
    }
    report.cases.sort_by(|a, b| a.entry_span.timestamp.cmp(&b.entry_span.timestamp).then_with(|| a.trace_id.cmp(&b.trace_id)));
    report
}
