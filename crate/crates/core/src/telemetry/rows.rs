//! Row access shared by the trace and metric readers. Both CSV (with a header
//! row) and line-delimited JSON objects are accepted; unknown columns are
//! ignored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use super::TelemetryError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    JsonLines,
}

impl RecordFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") | Some("json") => RecordFormat::JsonLines,
            _ => RecordFormat::Csv,
        }
    }
}

/// A parsed row: column name to raw text. Empty cells and JSON nulls are absent.
pub type Fields = HashMap<String, String>;

pub enum RawRow {
    Fields(Fields),
    /// The row could not be decoded at all.
    Broken(String),
}

pub fn open(path: &Path) -> Result<File, TelemetryError> {
    File::open(path).map_err(|source| TelemetryError::Unreadable { path: path.to_path_buf(), source })
}

/// Reads every row of `reader`. `required` columns are checked against the
/// CSV header up front; JSON rows are checked per row by the caller.
pub fn read_rows<R: Read>(
    reader: R,
    format: RecordFormat,
    required: &[&'static str],
) -> Result<Vec<RawRow>, TelemetryError> {
    match format {
        RecordFormat::Csv => read_csv(reader, required),
        RecordFormat::JsonLines => read_jsonl(reader),
    }
}

fn read_csv<R: Read>(reader: R, required: &[&'static str]) -> Result<Vec<RawRow>, TelemetryError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers.get(0) == Some("")) {
        return Ok(Vec::new());
    }
    for col in required {
        if !headers.iter().any(|h| h == *col) {
            return Err(TelemetryError::MissingColumn(col));
        }
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        match rec {
            Ok(rec) => {
                let mut fields = Fields::with_capacity(headers.len());
                for (h, v) in headers.iter().zip(rec.iter()) {
                    if !v.is_empty() {
                        fields.insert(h.to_string(), v.to_string());
                    }
                }
                out.push(RawRow::Fields(fields));
            }
            Err(e) if e.is_io_error() => return Err(e.into()),
            Err(e) => out.push(RawRow::Broken(e.to_string())),
        }
    }
    Ok(out)
}

fn read_jsonl<R: Read>(reader: R) -> Result<Vec<RawRow>, TelemetryError> {
    let mut out = Vec::new();
    for line in BufReader::new(reader).lines() {
        let line = line.map_err(|e| TelemetryError::Source(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = match serde_json::from_str::<serde_json::Value>(&line) {
            Ok(serde_json::Value::Object(map)) => {
                let mut fields = Fields::with_capacity(map.len());
                for (k, v) in map {
                    let text = match v {
                        serde_json::Value::Null => continue,
                        serde_json::Value::String(s) if s.is_empty() => continue,
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    fields.insert(k, text);
                }
                RawRow::Fields(fields)
            }
            Ok(_) => RawRow::Broken("record is not an object".to_string()),
            Err(e) => RawRow::Broken(format!("invalid record: {e}")),
        };
        out.push(row);
    }
    Ok(out)
}

pub fn required<'a>(fields: &'a Fields, name: &'static str) -> Result<&'a str, String> {
    fields.get(name).map(String::as_str).ok_or_else(|| format!("missing field `{name}`"))
}

pub fn parse_i64(fields: &Fields, name: &'static str) -> Result<i64, String> {
    let raw = required(fields, name)?;
    raw.parse::<i64>()
        .or_else(|_| {
            // tolerate integral floats such as "1647753157852.0"
            raw.parse::<f64>()
                .ok()
                .filter(|f| f.fract() == 0.0 && f.is_finite())
                .map(|f| f as i64)
                .ok_or(())
        })
        .map_err(|_| format!("field `{name}` is not an integer: `{raw}`"))
}

pub fn parse_f64(fields: &Fields, name: &'static str) -> Result<f64, String> {
    let raw = required(fields, name)?;
    raw.parse::<f64>().map_err(|_| format!("field `{name}` is not a number: `{raw}`"))
}
