use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rows::{self, Fields, RawRow, RecordFormat};
use super::{IngestReport, QuarantinedRow, TelemetryError};

/// One unit of work within a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanRecord {
    pub trace_id: String,
    pub span_id: String,
    pub parent_span_id: Option<String>,
    /// Milliseconds since the epoch.
    pub timestamp: i64,
    /// Microseconds.
    pub duration: u64,
    pub service: String,
    /// Pod / cmdb identifier.
    pub instance: String,
    pub node: Option<String>,
    pub operation: String,
    pub status: i64,
    pub protocol: String,
}

impl SpanRecord {
    pub fn timestamp_secs(&self) -> i64 {
        self.timestamp.div_euclid(1000)
    }

    fn from_fields(fields: &Fields) -> Result<Self, String> {
        let timestamp = rows::parse_i64(fields, "timestamp")?;
        if timestamp <= 0 {
            return Err(format!("timestamp must be positive, got {timestamp}"));
        }
        let duration = rows::parse_i64(fields, "duration")?;
        if duration < 0 {
            return Err(format!("duration must be non-negative, got {duration}"));
        }
        Ok(SpanRecord {
            trace_id: rows::required(fields, "trace_id")?.to_string(),
            span_id: rows::required(fields, "span_id")?.to_string(),
            parent_span_id: fields.get("parent_span_id").cloned(),
            timestamp,
            duration: duration as u64,
            service: rows::required(fields, "service")?.to_string(),
            instance: rows::required(fields, "cmdb_id")?.to_string(),
            node: fields.get("node").cloned(),
            operation: rows::required(fields, "operation")?.to_string(),
            status: rows::parse_i64(fields, "status")?,
            protocol: fields.get("protocol").cloned().unwrap_or_default(),
        })
    }
}

const TRACE_COLUMNS: [&str; 11] = [
    "timestamp",
    "cmdb_id",
    "trace_id",
    "span_id",
    "parent_span_id",
    "duration",
    "service",
    "operation",
    "status",
    "protocol",
    "node",
];

const REQUIRED_TRACE_COLUMNS: [&str; 8] =
    ["timestamp", "cmdb_id", "trace_id", "span_id", "duration", "service", "operation", "status"];

/// Spans of one trace with a child index.
#[derive(Debug, Clone)]
pub struct TraceSpans {
    /// Ordered by (timestamp, span_id).
    spans: Vec<SpanRecord>,
    by_id: HashMap<String, usize>,
    /// parent span_id -> child indices, ordered like `spans`.
    children: HashMap<String, Vec<usize>>,
}

impl TraceSpans {
    fn new(mut spans: Vec<SpanRecord>) -> Self {
        spans.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.span_id.cmp(&b.span_id)));
        let by_id = spans.iter().enumerate().map(|(i, s)| (s.span_id.clone(), i)).collect();
        let mut children: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, s) in spans.iter().enumerate() {
            if let Some(p) = &s.parent_span_id {
                children.entry(p.clone()).or_default().push(i);
            }
        }
        Self { spans, by_id, children }
    }

    pub fn spans(&self) -> &[SpanRecord] {
        &self.spans
    }

    pub fn span(&self, span_id: &str) -> Option<&SpanRecord> {
        self.by_id.get(span_id).map(|&i| &self.spans[i])
    }

    pub fn children_of(&self, span_id: &str) -> impl Iterator<Item = &SpanRecord> {
        self.children.get(span_id).into_iter().flatten().map(move |&i| &self.spans[i])
    }

    pub fn entry_spans(&self) -> impl Iterator<Item = &SpanRecord> {
        self.spans.iter().filter(|s| s.parent_span_id.is_none())
    }
}

/// Immutable store of ingested spans, indexed by trace and span id.
#[derive(Debug, Clone, Default)]
pub struct TraceStore {
    traces: BTreeMap<String, TraceSpans>,
    /// span_id -> trace ids containing it (span ids are only unique per trace).
    span_index: HashMap<String, Vec<String>>,
    report: IngestReport,
}

impl TraceStore {
    /// Builds a store from already-parsed records, applying the same
    /// quarantine rules as file ingestion.
    pub fn from_records(records: impl IntoIterator<Item = SpanRecord>) -> Self {
        let rows = records.into_iter().map(Ok).collect();
        Self::assemble(rows)
    }

    pub fn ingest<R: Read>(reader: R, format: RecordFormat) -> Result<Self, TelemetryError> {
        let raw = rows::read_rows(reader, format, &REQUIRED_TRACE_COLUMNS)?;
        let parsed = raw
            .into_iter()
            .map(|r| match r {
                RawRow::Fields(f) => SpanRecord::from_fields(&f).map_err(|e| (e, f.get("trace_id").cloned(), f.get("span_id").cloned())),
                RawRow::Broken(e) => Err((e, None, None)),
            })
            .collect();
        Ok(Self::assemble(parsed))
    }

    pub fn ingest_csv<R: Read>(reader: R) -> Result<Self, TelemetryError> {
        Self::ingest(reader, RecordFormat::Csv)
    }

    pub fn ingest_jsonl<R: Read>(reader: R) -> Result<Self, TelemetryError> {
        Self::ingest(reader, RecordFormat::JsonLines)
    }

    /// Reads a trace file; `.jsonl`/`.ndjson` files are line-delimited JSON,
    /// anything else is CSV.
    pub fn ingest_path(path: &Path) -> Result<Self, TelemetryError> {
        let file = rows::open(path)?;
        Self::ingest(std::io::BufReader::new(file), RecordFormat::from_path(path))
    }

    #[allow(clippy::type_complexity)]
    fn assemble(rows: Vec<Result<SpanRecord, (String, Option<String>, Option<String>)>>) -> Self {
        let mut report = IngestReport { rows_read: rows.len(), ..Default::default() };
        let mut per_trace: BTreeMap<String, Vec<(usize, SpanRecord)>> = BTreeMap::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();

        for (i, row) in rows.into_iter().enumerate() {
            let row_no = i + 1;
            match row {
                Ok(span) => {
                    if !seen.insert((span.trace_id.clone(), span.span_id.clone())) {
                        report.quarantined.push(QuarantinedRow {
                            row: row_no,
                            trace_id: Some(span.trace_id),
                            span_id: Some(span.span_id),
                            reason: "duplicate span_id within trace".to_string(),
                        });
                        continue;
                    }
                    per_trace.entry(span.trace_id.clone()).or_default().push((row_no, span));
                }
                Err((reason, trace_id, span_id)) => {
                    report.quarantined.push(QuarantinedRow { row: row_no, trace_id, span_id, reason });
                }
            }
        }

        // Drop spans whose parent is absent from the trace; repeat so that
        // descendants of quarantined spans are quarantined too.
        let mut traces = BTreeMap::new();
        for (trace_id, mut spans) in per_trace {
            loop {
                let ids: HashSet<String> = spans.iter().map(|(_, s)| s.span_id.clone()).collect();
                let (keep, orphans): (Vec<_>, Vec<_>) = spans
                    .into_iter()
                    .partition(|(_, s)| s.parent_span_id.as_ref().is_none_or(|p| ids.contains(p)));
                spans = keep;
                if orphans.is_empty() {
                    break;
                }
                for (row_no, s) in orphans {
                    report.quarantined.push(QuarantinedRow {
                        row: row_no,
                        reason: format!(
                            "parent span `{}` not present in trace",
                            s.parent_span_id.as_deref().unwrap_or_default()
                        ),
                        trace_id: Some(s.trace_id),
                        span_id: Some(s.span_id),
                    });
                }
            }
            if !spans.is_empty() {
                report.accepted += spans.len();
                traces.insert(trace_id, TraceSpans::new(spans.into_iter().map(|(_, s)| s).collect()));
            }
        }
        report.quarantined.sort_by_key(|q| q.row);

        let mut span_index: HashMap<String, Vec<String>> = HashMap::new();
        for (trace_id, t) in &traces {
            for s in &t.spans {
                span_index.entry(s.span_id.clone()).or_default().push(trace_id.clone());
            }
        }
        TraceStore { traces, span_index, report }
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn trace_count(&self) -> usize {
        self.traces.len()
    }

    pub fn span_count(&self) -> usize {
        self.traces.values().map(|t| t.spans.len()).sum()
    }

    pub fn trace(&self, trace_id: &str) -> Option<&TraceSpans> {
        self.traces.get(trace_id)
    }

    pub fn traces(&self) -> impl Iterator<Item = (&str, &TraceSpans)> {
        self.traces.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn spans(&self) -> impl Iterator<Item = &SpanRecord> {
        self.traces.values().flat_map(|t| t.spans.iter())
    }

    /// Resolves a span id, preferring `trace_hint` when the id exists in
    /// several traces. Returns the owning trace.
    pub fn locate(&self, span_id: &str, trace_hint: Option<&str>) -> Option<&TraceSpans> {
        if let Some(t) = trace_hint.and_then(|h| self.traces.get(h)) {
            if t.by_id.contains_key(span_id) {
                return Some(t);
            }
        }
        let owner = self.span_index.get(span_id)?.first()?;
        self.traces.get(owner)
    }
}

/// Parent/child structure of one trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceGraph {
    pub trace_id: String,
    pub entry_span_id: String,
    pub spans: BTreeMap<String, SpanRecord>,
    /// span_id -> children ordered by (timestamp, span_id).
    pub children: BTreeMap<String, Vec<String>>,
}

impl TraceGraph {
    pub fn entry(&self) -> &SpanRecord {
        &self.spans[&self.entry_span_id]
    }

    pub fn edge_count(&self) -> usize {
        self.children.values().map(Vec::len).sum()
    }

    pub fn children_of(&self, span_id: &str) -> &[String] {
        self.children.get(span_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn build_trace_graph(store: &TraceStore, trace_id: &str) -> Result<TraceGraph, TelemetryError> {
    let trace = store.trace(trace_id).ok_or_else(|| TelemetryError::UnknownTrace(trace_id.to_string()))?;
    let roots: Vec<&SpanRecord> = trace.entry_spans().collect();
    match roots.len() {
        1 => {}
        0 => {
            return Err(TelemetryError::MalformedTrace {
                trace_id: trace_id.to_string(),
                detail: "no entry span",
                spans: trace.spans.iter().map(|s| s.span_id.clone()).collect(),
            })
        }
        _ => {
            return Err(TelemetryError::MalformedTrace {
                trace_id: trace_id.to_string(),
                detail: "multiple entry spans",
                spans: roots.iter().map(|s| s.span_id.clone()).collect(),
            })
        }
    }
    let entry = roots[0].span_id.clone();

    let mut children = BTreeMap::new();
    for s in &trace.spans {
        let kids: Vec<String> = trace.children_of(&s.span_id).map(|c| c.span_id.clone()).collect();
        if !kids.is_empty() {
            children.insert(s.span_id.clone(), kids);
        }
    }

    // Every span must be reachable from the entry; leftovers sit on a cycle.
    let mut visited: HashSet<&str> = HashSet::new();
    let mut stack = vec![entry.as_str()];
    while let Some(id) = stack.pop() {
        if visited.insert(id) {
            if let Some(kids) = children.get(id) {
                stack.extend(kids.iter().map(String::as_str));
            }
        }
    }
    if visited.len() != trace.spans.len() {
        let mut stray: Vec<String> =
            trace.spans.iter().filter(|s| !visited.contains(s.span_id.as_str())).map(|s| s.span_id.clone()).collect();
        stray.sort();
        return Err(TelemetryError::MalformedTrace {
            trace_id: trace_id.to_string(),
            detail: "spans unreachable from entry span (cycle)",
            spans: stray,
        });
    }

    Ok(TraceGraph {
        trace_id: trace_id.to_string(),
        entry_span_id: entry,
        spans: trace.spans.iter().map(|s| (s.span_id.clone(), s.clone())).collect(),
        children,
    })
}

/// Writes every accepted span as CSV in the canonical column order.
pub fn write_traces_csv<W: Write>(spans: impl IntoIterator<Item = impl std::borrow::Borrow<SpanRecord>>, writer: W) -> Result<(), TelemetryError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(TRACE_COLUMNS)?;
    for s in spans {
        let s = s.borrow();
        w.write_record([
            s.timestamp.to_string().as_str(),
            &s.instance,
            &s.trace_id,
            &s.span_id,
            s.parent_span_id.as_deref().unwrap_or(""),
            &s.duration.to_string(),
            &s.service,
            &s.operation,
            &s.status.to_string(),
            &s.protocol,
            s.node.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| TelemetryError::Write(e.to_string()))
}
