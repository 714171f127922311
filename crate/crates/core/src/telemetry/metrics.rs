use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rows::{self, Fields, RawRow, RecordFormat};
use super::{IngestReport, QuarantinedRow, TelemetryError};
use crate::component::{ComponentLevel, ComponentRef};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MetricKey {
    pub component: ComponentRef,
    pub metric_name: String,
}

impl MetricKey {
    pub fn new(component: ComponentRef, metric_name: impl Into<String>) -> Self {
        Self { component, metric_name: metric_name.into() }
    }
}

impl fmt::Display for MetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.component.id(), self.metric_name)
    }
}

/// One row of the metrics file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// Seconds since the epoch.
    pub timestamp: i64,
    pub component_level: ComponentLevel,
    pub component_id: String,
    pub metric_name: String,
    pub value: f64,
}

impl MetricRow {
    fn from_fields(fields: &Fields) -> Result<Self, String> {
        let level = rows::required(fields, "component_level")?;
        let component_level = level.parse::<ComponentLevel>().map_err(|e| e.to_string())?;
        let value = rows::parse_f64(fields, "value")?;
        if !value.is_finite() {
            return Err(format!("value must be finite, got {value}"));
        }
        Ok(MetricRow {
            timestamp: rows::parse_i64(fields, "timestamp")?,
            component_level,
            component_id: rows::required(fields, "component_id")?.to_string(),
            metric_name: rows::required(fields, "metric_name")?.to_string(),
            value,
        })
    }

    pub fn key(&self) -> Result<MetricKey, String> {
        let c = ComponentRef::new(self.component_level, self.component_id.clone()).map_err(|e| e.to_string())?;
        Ok(MetricKey::new(c, self.metric_name.clone()))
    }
}

/// Time-stamped measurements of one metric on one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub key: MetricKey,
    /// Strictly increasing timestamps (seconds), finite values.
    pub points: Vec<(i64, f64)>,
}

impl MetricSeries {
    /// Points with `start <= t <= end`.
    pub fn window(&self, start: i64, end: i64) -> &[(i64, f64)] {
        let lo = self.points.partition_point(|&(t, _)| t < start);
        let hi = self.points.partition_point(|&(t, _)| t <= end);
        &self.points[lo..hi.max(lo)]
    }
}

const REQUIRED_METRIC_COLUMNS: [&str; 5] = ["timestamp", "component_level", "component_id", "metric_name", "value"];

/// Immutable store of metric series keyed by (component, metric name).
#[derive(Debug, Clone, Default)]
pub struct MetricStore {
    series: BTreeMap<MetricKey, MetricSeries>,
    report: IngestReport,
}

impl MetricStore {
    pub fn from_rows(rows: impl IntoIterator<Item = MetricRow>) -> Self {
        Self::assemble(rows.into_iter().map(Ok).collect())
    }

    pub fn ingest<R: Read>(reader: R, format: RecordFormat) -> Result<Self, TelemetryError> {
        let raw = rows::read_rows(reader, format, &REQUIRED_METRIC_COLUMNS)?;
        let parsed = raw
            .into_iter()
            .map(|r| match r {
                RawRow::Fields(f) => MetricRow::from_fields(&f),
                RawRow::Broken(e) => Err(e),
            })
            .collect();
        Ok(Self::assemble(parsed))
    }

    pub fn ingest_csv<R: Read>(reader: R) -> Result<Self, TelemetryError> {
        Self::ingest(reader, RecordFormat::Csv)
    }

    pub fn ingest_path(path: &Path) -> Result<Self, TelemetryError> {
        let file = rows::open(path)?;
        Self::ingest(std::io::BufReader::new(file), RecordFormat::from_path(path))
    }

    fn assemble(rows: Vec<Result<MetricRow, String>>) -> Self {
        let mut report = IngestReport { rows_read: rows.len(), ..Default::default() };
        let mut grouped: BTreeMap<MetricKey, Vec<(usize, i64, f64)>> = BTreeMap::new();
        for (i, row) in rows.into_iter().enumerate() {
            let row_no = i + 1;
            match row.and_then(|r| r.key().map(|k| (k, r))) {
                Ok((key, r)) => grouped.entry(key).or_default().push((row_no, r.timestamp, r.value)),
                Err(reason) => report.quarantined.push(QuarantinedRow { row: row_no, trace_id: None, span_id: None, reason }),
            }
        }
        let mut series = BTreeMap::new();
        for (key, mut pts) in grouped {
            pts.sort_by_key(|&(row, t, _)| (t, row));
            let mut points: Vec<(i64, f64)> = Vec::with_capacity(pts.len());
            for (row_no, t, v) in pts {
                if points.last().is_some_and(|&(last, _)| last == t) {
                    report.quarantined.push(QuarantinedRow {
                        row: row_no,
                        trace_id: None,
                        span_id: None,
                        reason: format!("duplicate timestamp {t} for {key}"),
                    });
                    continue;
                }
                points.push((t, v));
            }
            report.accepted += points.len();
            series.insert(key.clone(), MetricSeries { key, points });
        }
        report.quarantined.sort_by_key(|q| q.row);
        MetricStore { series, report }
    }

    pub fn report(&self) -> &IngestReport {
        &self.report
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn get(&self, key: &MetricKey) -> Option<&MetricSeries> {
        self.series.get(key)
    }

    pub fn series(&self) -> impl Iterator<Item = &MetricSeries> {
        self.series.values()
    }

    /// All series attached to `component`, in key order.
    pub fn series_for<'a>(&'a self, component: &'a ComponentRef) -> impl Iterator<Item = &'a MetricSeries> + 'a {
        let start = MetricKey::new(component.clone(), String::new());
        self.series.range(start..).map(|(_, s)| s).take_while(move |s| &s.key.component == component)
    }

    /// Overall time range covered by the store, in seconds.
    pub fn time_range(&self) -> Option<(i64, i64)> {
        let lo = self.series.values().filter_map(|s| s.points.first().map(|p| p.0)).min()?;
        let hi = self.series.values().filter_map(|s| s.points.last().map(|p| p.0)).max()?;
        Some((lo, hi))
    }
}

pub fn write_metrics_csv<W: Write>(rows: impl IntoIterator<Item = impl std::borrow::Borrow<MetricRow>>, writer: W) -> Result<(), TelemetryError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REQUIRED_METRIC_COLUMNS)?;
    for r in rows {
        let r = r.borrow();
        w.write_record([
            r.timestamp.to_string().as_str(),
            r.component_level.as_str(),
            &r.component_id,
            &r.metric_name,
            &r.value.to_string(),
        ])?;
    }
    w.flush().map_err(|e| TelemetryError::Write(e.to_string()))
}

/// Historical mean and population standard deviation of one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBaseline {
    pub key: MetricKey,
    pub mean: f64,
    pub std: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaselineReport {
    pub baselines: BTreeMap<MetricKey, MetricBaseline>,
    /// Series without a single point inside the window.
    pub omitted: Vec<MetricKey>,
}

impl BaselineReport {
    pub fn get(&self, key: &MetricKey) -> Option<&MetricBaseline> {
        self.baselines.get(key)
    }
}

/// Per-series population mean/std over points with `t0 <= t <= t1`,
/// accumulated with Welford's update.
pub fn compute_baselines<'a>(
    series: impl IntoIterator<Item = &'a MetricSeries>,
    window: (i64, i64),
) -> Result<BaselineReport, TelemetryError> {
    let (t0, t1) = window;
    if t0 > t1 {
        return Err(TelemetryError::InvertedWindow { start: t0, end: t1 });
    }
    let mut report = BaselineReport::default();
    for s in series {
        let pts = s.window(t0, t1);
        if pts.is_empty() {
            report.omitted.push(s.key.clone());
            continue;
        }
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (i, &(_, x)) in pts.iter().enumerate() {
            let delta = x - mean;
            mean += delta / (i + 1) as f64;
            m2 += delta * (x - mean);
        }
        let n = pts.len();
        let std = (m2.max(0.0) / n as f64).sqrt();
        report.baselines.insert(s.key.clone(), MetricBaseline { key: s.key.clone(), mean, std, sample_count: n });
    }
    Ok(report)
}
