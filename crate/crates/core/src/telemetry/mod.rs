//! Trace and metric ingestion, span graphs, metric baselines and
//! anomalous-request detection.
//!
//! Span timestamps are milliseconds since the epoch and span durations are
//! microseconds, as in the recorded datasets this crate targets. Metric
//! timestamps are whole seconds.

mod detect;
mod index;
mod metrics;
mod rows;
mod traces;

pub use detect::{
    detect_anomalous_traces, entry_latency_baselines, DetectConfig, DetectionReport, FailureCase,
    LatencyBaseline, LatencyBaselineConfig, LatencyBaselines, Trigger, DEFAULT_OK_STATUSES,
};
pub use index::ComponentIndex;
pub use metrics::{
    compute_baselines, write_metrics_csv, BaselineReport, MetricBaseline, MetricKey, MetricRow, MetricSeries,
    MetricStore,
};
pub use traces::{build_trace_graph, write_traces_csv, SpanRecord, TraceGraph, TraceSpans, TraceStore};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TelemetryError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed source: {0}")]
    Source(String),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("unknown trace `{0}`")]
    UnknownTrace(String),
    #[error("malformed trace {trace_id}: {detail} (spans: {})", spans.join(", "))]
    MalformedTrace {
        trace_id: String,
        detail: &'static str,
        spans: Vec<String>,
    },
    #[error("inverted window: start {start} > end {end}")]
    InvertedWindow { start: i64, end: i64 },
    #[error("write failed: {0}")]
    Write(String),
}

impl From<csv::Error> for TelemetryError {
    fn from(e: csv::Error) -> Self {
        TelemetryError::Source(e.to_string())
    }
}

/// One row that failed validation, kept for reporting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantinedRow {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub trace_id: Option<String>,
    pub span_id: Option<String>,
    pub reason: String,
}

/// Outcome of an ingestion pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub accepted: usize,
    pub quarantined: Vec<QuarantinedRow>,
}

impl IngestReport {
    pub fn quarantined_count(&self) -> usize {
        self.quarantined.len()
    }
}
