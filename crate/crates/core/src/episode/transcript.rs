//! Line-delimited JSON transcripts: one header record, one record per step,
//! one answer record.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{ActionStep, EpisodeResult, EpisodeStatus, InferencePath};
use crate::component::ComponentRef;
use crate::telemetry::FailureCase;
use crate::tools::FinalAnswer;

pub const TRANSCRIPT_SCHEMA: &str = "flforge-transcript/1";

#[derive(Debug, thiserror::Error)]
pub enum TranscriptError {
    #[error("transcript I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("transcript is missing its {0} record")]
    Missing(&'static str),
    #[error("line {0}: record out of order")]
    OutOfOrder(usize),
}

/// Run context written into the header record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptMeta {
    pub question_id: String,
    pub rollout: usize,
    pub seed: u64,
    pub policy: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<ComponentRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Header {
        schema: String,
        #[serde(flatten)]
        meta: TranscriptMeta,
        case: FailureCase,
    },
    Step(ActionStep),
    Answer {
        status: EpisodeStatus,
        depth_used: usize,
        answer: Option<FinalAnswer>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure: Option<String>,
    },
}

pub fn write_transcript<W: Write>(result: &EpisodeResult, meta: &TranscriptMeta, mut w: W) -> Result<(), TranscriptError> {
    let mut emit = |r: &TranscriptRecord| -> Result<(), TranscriptError> {
        serde_json::to_writer(&mut w, r).map_err(|source| TranscriptError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
        Ok(())
    };
    emit(&TranscriptRecord::Header { schema: TRANSCRIPT_SCHEMA.into(), meta: meta.clone(), case: result.path.case.clone() })?;
    for s in &result.path.steps {
        emit(&TranscriptRecord::Step(s.clone()))?;
    }
    emit(&TranscriptRecord::Answer {
        status: result.status,
        depth_used: result.depth_used,
        answer: result.answer.clone(),
        failure: result.failure.clone(),
    })?;
    w.flush()?;
    Ok(())
}

pub fn read_transcript<R: BufRead>(r: R) -> Result<(TranscriptMeta, EpisodeResult), TranscriptError> {
    let mut header: Option<(TranscriptMeta, FailureCase)> = None;
    let mut steps = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|source| TranscriptError::Json { line: i + 1, source })?;
        match rec {
            TranscriptRecord::Header { meta, case, .. } => {
                if header.is_some() {
                    return Err(TranscriptError::OutOfOrder(i + 1));
                }
                header = Some((meta, case));
            }
            TranscriptRecord::Step(s) => {
                if header.is_none() {
                    return Err(TranscriptError::OutOfOrder(i + 1));
                }
                steps.push(s);
            }
            TranscriptRecord::Answer { status, depth_used, answer, failure } => {
                let (meta, case) = header.ok_or(TranscriptError::Missing("header"))?;
                let seed = meta.seed;
                let path = InferencePath { case, steps };
                return Ok((meta, EpisodeResult { path, status, answer, depth_used, seed, failure }));
            }
        }
    }
    Err(TranscriptError::Missing(if header.is_some() { "answer" } else { "header" }))
}
