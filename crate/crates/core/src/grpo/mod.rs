//! Group-relative reward machinery: softmax weights over a rollout group,
//! normalized advantages, a divergence check between weightings, and export
//! of graded rollouts for an external trainer.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::episode::EpisodeResult;
use crate::graders::Stage;
use crate::telemetry::SpanRecord;

pub const ROLLOUTS_SCHEMA: &str = "flforge-rollouts/1";
pub const ADVANTAGE_EPSILON: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("reward {index} is not finite")]
    NonFiniteReward { index: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("empty reward group")]
    EmptyGroup,
    #[error("weight vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("group `{question_id}` has {rollouts} rollouts but {rewards} rewards")]
    Misaligned { question_id: String, rollouts: usize, rewards: usize },
    #[error("export failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("rollout file line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("rollout file has no header or an unsupported schema")]
    BadHeader,
}

/// `exp(tau * R_i) / sum_j exp(tau * R_j)`, shifted by the max reward.
pub fn group_weights(rewards: &[f64], temperature: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(GrpoError::BadTemperature(temperature));
    }
    if let Some(index) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFiniteReward { index });
    }
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = rewards.iter().map(|r| (temperature * (r - max)).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `(R_i - mean) / (std + 1e-8)` with the population std; a single rollout
/// gets 0.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.len() < 2 {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPSILON)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCheck {
    pub divergence: f64,
    pub within_bound: bool,
}

/// `sum w_new * ln(w_new / w_old)` with `0 * ln(0 / x) = 0`; infinite when
/// new mass sits where the old weighting has none.
pub fn kl_group_check(new: &[f64], old: &[f64], delta: f64) -> Result<DivergenceCheck, GrpoError> {
    if new.len() != old.len() {
        return Err(GrpoError::LengthMismatch(new.len(), old.len()));
    }
    let mut d = 0.0;
    for (&p, &q) in new.iter().zip(old) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            d = f64::INFINITY;
            break;
        }
        d += p * (p / q).ln();
    }
    // rounding can leave tiny negatives for equal inputs
    let divergence = if d < 0.0 && d > -1e-15 { 0.0 } else { d };
    Ok(DivergenceCheck { divergence, within_bound: divergence <= delta })
}

/// The k graded rollouts of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub question_id: String,
    pub rollouts: Vec<EpisodeResult>,
    pub rewards: Vec<f64>,
    pub temperature: f64,
}

impl RolloutGroup {
    fn check(&self) -> Result<(), GrpoError> {
        if self.rollouts.is_empty() || self.rollouts.len() != self.rewards.len() {
            return Err(GrpoError::Misaligned {
                question_id: self.question_id.clone(),
                rollouts: self.rollouts.len(),
                rewards: self.rewards.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub schema: String,
    pub stage: Stage,
    /// Base seed of the run; rollout i used `rollout_seed(seed, i)`.
    pub seed: u64,
    pub grader_config_digest: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedRollout {
    pub transcript_ref: String,
    pub reward: f64,
    pub weight: f64,
    pub advantage: f64,
    pub episode: EpisodeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub question_id: String,
    pub entry_context: SpanRecord,
    pub stage: Stage,
    pub temperature: f64,
    pub grader_config_digest: String,
    pub rollouts: Vec<ExportedRollout>,
}

impl ExportRecord {
    pub fn into_group(self) -> RolloutGroup {
        let (rollouts, rewards) = self.rollouts.into_iter().map(|r| (r.episode, r.reward)).unzip();
        RolloutGroup { question_id: self.question_id, rollouts, rewards, temperature: self.temperature }
    }
}

/// Relative path of a rollout transcript inside a batch output directory.
pub fn transcript_ref(question_id: &str, rollout: usize) -> String {
    format!("transcripts/{question_id}/{rollout}.jsonl")
}

const EXPORT_NOTE: &str = "rewards, softmax weights and advantages only; the group policy objective is evaluated by the external trainer";

/// Writes one header line and one record per group. The file is written to
/// a temporary sibling and renamed into place, so a failure leaves nothing
/// behind.
pub fn export_training_records(
    groups: &[RolloutGroup],
    stage: Stage,
    seed: u64,
    grader_config_digest: &str,
    dest: &Path,
) -> Result<usize, GrpoError> {
    let mut records = Vec::with_capacity(groups.len());
    for g in groups {
        g.check()?;
        let weights = group_weights(&g.rewards, g.temperature)?;
        let advantages = group_advantages(&g.rewards);
        let rollouts = g
            .rollouts
            .iter()
            .zip(&g.rewards)
            .zip(weights.iter().zip(&advantages))
            .enumerate()
            .map(|(i, ((ep, &reward), (&weight, &advantage)))| ExportedRollout {
                transcript_ref: transcript_ref(&g.question_id, i),
                reward,
                weight,
                advantage,
                episode: ep.clone(),
            })
            .collect();
        records.push(ExportRecord {
            question_id: g.question_id.clone(),
            entry_context: g.rollouts[0].path.case.entry_span.clone(),
            stage,
            temperature: g.temperature,
            grader_config_digest: grader_config_digest.to_string(),
            rollouts,
        });
    }
    let dir = match dest.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        let header = ExportHeader {
            schema: ROLLOUTS_SCHEMA.into(),
            stage,
            seed,
            grader_config_digest: grader_config_digest.to_string(),
            note: EXPORT_NOTE.into(),
        };
        serde_json::to_writer(&mut w, &header).map_err(|source| GrpoError::Json { line: 1, source })?;
        w.write_all(b"\n")?;
        for (i, r) in records.iter().enumerate() {
            serde_json::to_writer(&mut w, r).map_err(|source| GrpoError::Json { line: i + 2, source })?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    tmp.persist(dest).map_err(|e| GrpoError::Io(e.error))?;
    Ok(records.len())
}

pub fn read_training_records<R: BufRead>(r: R) -> Result<(ExportHeader, Vec<ExportRecord>), GrpoError> {
    let mut lines = r.lines().enumerate();
    let header: ExportHeader = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|_| GrpoError::BadHeader)?,
        None => return Err(GrpoError::BadHeader),
    };
    if header.schema != ROLLOUTS_SCHEMA {
        return Err(GrpoError::BadHeader);
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| GrpoError::Json { line: i + 1, source })?);
    }
    Ok((header, out))
}
