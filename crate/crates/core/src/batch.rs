//! Batch runs written to disk: per-rollout transcripts, grades, the
//! training-record export, case outcomes and the evaluation report.
//!
//! Output layout under the run directory:
//!
//! ```text
//! transcripts/<question>/<rollout>.jsonl
//! grades.jsonl      one GradeRecord per graded rollout
//! rollouts.jsonl    training records (labeled cases only)
//! outcomes.jsonl    one CaseOutcome per graded rollout
//! report.json       EvalReport
//! report.txt        the same, as a table
//! ```
//!
//! Every file is a pure function of the inputs and settings, so identical
//! runs produce identical bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::component::ComponentRef;
use crate::episode::{read_transcript, write_transcript, EpisodeConfig, EpisodeResult, TranscriptError, TranscriptMeta};
use crate::eval::{CaseOutcome, EvalError, EvalReport};
use crate::graders::{stage_grade, GradeBreakdown, GradeConfig, GraderError, PathCache, Stage};
use crate::grpo::{export_training_records, transcript_ref, GrpoError, RolloutGroup};
use crate::pipeline::{run_policy, CaseRun, Dataset, PipelineError};
use crate::policy::PolicyDescriptor;
use crate::tools::FinalAnswer;

pub const TRANSCRIPTS_DIR: &str = "transcripts";
pub const GRADES_FILE: &str = "grades.jsonl";
pub const ROLLOUTS_FILE: &str = "rollouts.jsonl";
pub const OUTCOMES_FILE: &str = "outcomes.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

#[derive(Debug, thiserror::Error)]
pub enum BatchError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Grader(#[from] GraderError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |source| BatchError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSettings {
    pub policy: PolicyDescriptor,
    pub episode: EpisodeConfig,
    pub grade: GradeConfig,
    pub stage: Stage,
    /// Rollouts per case.
    pub k: usize,
    /// Softmax temperature for the group weights.
    pub temperature: f64,
    pub per_level: bool,
}

impl Default for BatchSettings {
    fn default() -> Self {
        BatchSettings {
            policy: PolicyDescriptor::default(),
            episode: EpisodeConfig::default(),
            grade: GradeConfig::default(),
            stage: Stage::Refinement,
            k: 1,
            temperature: 1.0,
            per_level: false,
        }
    }
}

/// One graded rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub question_id: String,
    pub rollout: usize,
    pub seed: u64,
    pub stage: Stage,
    pub reward: f64,
    pub truth: ComponentRef,
    pub grade: GradeBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub cases: usize,
    pub labeled_cases: usize,
    pub episodes: usize,
    pub exported_groups: usize,
    /// Absent when nothing was labeled.
    pub report: Option<EvalReport>,
}

fn outcome_id(question_id: &str, rollout: usize, k: usize) -> String {
    if k == 1 {
        question_id.to_string()
    } else {
        format!("{question_id}/{rollout}")
    }
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), BatchError> {
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for (i, item) in items.into_iter().enumerate() {
        serde_json::to_writer(&mut w, &item).map_err(|source| BatchError::Json { path: path.into(), line: i + 1, source })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, BatchError> {
    let r = BufReader::new(fs::File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| BatchError::Json { path: path.into(), line: i + 1, source })?);
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<(), BatchError> {
    fs::write(path, text).map_err(io_err(path))
}

/// Runs the policy over every selected case and writes all artifacts under
/// `out_dir`.
pub fn run_batch_to_dir(datasets: &[Dataset], settings: &BatchSettings, jobs: usize, out_dir: &Path) -> Result<BatchSummary, BatchError> {
    settings.grade.validate()?;
    let runs = run_policy(datasets, &settings.policy, &settings.episode, settings.k, jobs)?;
    record_runs(&runs, settings, out_dir)
}

/// Writes transcripts, grades, the export, outcomes and report for runs
/// that have already happened.
pub fn record_runs(runs: &[CaseRun], settings: &BatchSettings, out_dir: &Path) -> Result<BatchSummary, BatchError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let policy_name = settings.policy.to_string();
    for run in runs {
        for (i, ep) in run.rollouts.iter().enumerate() {
            let path = out_dir.join(transcript_ref(run.case.id(), i));
            let parent = path.parent().expect("transcript paths have a directory");
            fs::create_dir_all(parent).map_err(io_err(parent))?;
            let meta = TranscriptMeta {
                question_id: run.case.id().to_string(),
                rollout: i,
                seed: ep.seed,
                policy: policy_name.clone(),
                truth: run.truth.clone(),
            };
            let f = fs::File::create(&path).map_err(io_err(&path))?;
            write_transcript(ep, &meta, BufWriter::new(f))?;
        }
    }

    let cache = PathCache::new();
    let mut grades = Vec::new();
    let mut outcomes = Vec::new();
    let mut groups = Vec::new();
    for run in runs {
        let Some(truth) = &run.truth else { continue };
        let q = run.case.id();
        let mut rewards = Vec::with_capacity(run.rollouts.len());
        for (i, ep) in run.rollouts.iter().enumerate() {
            let (reward, grade) = stage_grade(settings.stage, ep, truth, &settings.grade, Some((&cache, q)))?;
            rewards.push(reward);
            grades.push(GradeRecord { question_id: q.to_string(), rollout: i, seed: ep.seed, stage: settings.stage, reward, truth: truth.clone(), grade });
            outcomes.push(CaseOutcome::new(outcome_id(q, i, settings.k), answer_of(ep), truth.clone()));
        }
        groups.push(RolloutGroup { question_id: q.to_string(), rollouts: run.rollouts.clone(), rewards, temperature: settings.temperature });
    }

    write_lines(&out_dir.join(GRADES_FILE), &grades)?;
    write_lines(&out_dir.join(OUTCOMES_FILE), &outcomes)?;
    let exported = export_training_records(&groups, settings.stage, settings.episode.seed, &settings.grade.digest(), &out_dir.join(ROLLOUTS_FILE))?;
    let report = if outcomes.is_empty() { None } else { Some(write_report(&outcomes, settings.per_level, out_dir)?) };
    Ok(BatchSummary {
        cases: runs.len(),
        labeled_cases: groups.len(),
        episodes: runs.iter().map(|r| r.rollouts.len()).sum(),
        exported_groups: exported,
        report,
    })
}

fn answer_of(ep: &EpisodeResult) -> FinalAnswer {
    ep.answer.clone().unwrap_or(FinalAnswer { candidates: Vec::new(), printed_by_policy: false })
}

/// Builds the report from outcomes and writes `report.json` and `report.txt`.
pub fn write_report(outcomes: &[CaseOutcome], per_level: bool, out_dir: &Path) -> Result<EvalReport, BatchError> {
    let report = EvalReport::build(outcomes, per_level)?;
    let mut json = serde_json::to_string_pretty(&report).expect("reports serialize");
    json.push('\n');
    write_text(&out_dir.join(REPORT_JSON), &json)?;
    write_text(&out_dir.join(REPORT_TXT), &report.render_table())?;
    Ok(report)
}

/// Every transcript under `dir` (recursively), sorted by path.
pub fn find_transcripts(dir: &Path) -> Result<Vec<PathBuf>, BatchError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let p = entry.map_err(io_err(&d))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "jsonl") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Re-grades stored transcripts under a new configuration. Transcripts
/// without a recorded truth are skipped and counted.
pub fn regrade(transcripts: &[PathBuf], cfg: &GradeConfig, stage: Stage) -> Result<(Vec<GradeRecord>, usize), BatchError> {
    cfg.validate()?;
    let mut loaded = Vec::with_capacity(transcripts.len());
    for p in transcripts {
        let f = fs::File::open(p).map_err(io_err(p))?;
        loaded.push(read_transcript(BufReader::new(f))?);
    }
    // grade in (question, rollout) order so the path cache sees the same sequence
    loaded.sort_by(|a, b| (&a.0.question_id, a.0.rollout).cmp(&(&b.0.question_id, b.0.rollout)));
    let cache = PathCache::new();
    let mut out = Vec::new();
    let mut skipped = 0;
    for (meta, ep) in &loaded {
        let Some(truth) = &meta.truth else {
            skipped += 1;
            continue;
        };
        let (reward, grade) = stage_grade(stage, ep, truth, cfg, Some((&cache, &meta.question_id)))?;
        out.push(GradeRecord { question_id: meta.question_id.clone(), rollout: meta.rollout, seed: meta.seed, stage, reward, truth: truth.clone(), grade });
    }
    Ok((out, skipped))
}

pub fn write_grades(path: &Path, grades: &[GradeRecord]) -> Result<(), BatchError> {
    write_lines(path, grades)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{load_dir, CaseSelection, LoadOptions};
    use crate::synth::{gen_suite_with, Preset, SuiteOptions};

    fn suite() -> (tempfile::TempDir, Vec<Dataset>) {
        let dir = tempfile::tempdir().unwrap();
        gen_suite_with(Preset::Small, 3, 1, dir.path(), &SuiteOptions { n_requests: 400, ..Default::default() }).unwrap();
        let ds = load_dir(dir.path(), &LoadOptions { selection: CaseSelection::FirstLabeled, ..Default::default() }).unwrap();
        (dir, ds)
    }

    #[test]
    fn batch_writes_every_artifact_and_regrades_identically() {
        let (_g, ds) = suite();
        let out = tempfile::tempdir().unwrap();
        let settings = BatchSettings { k: 2, stage: Stage::Priming, ..Default::default() };
        let s = run_batch_to_dir(&ds, &settings, 2, out.path()).unwrap();
        assert_eq!((s.cases, s.labeled_cases, s.episodes, s.exported_groups), (3, 3, 6, 3));
        for f in [GRADES_FILE, ROLLOUTS_FILE, OUTCOMES_FILE, REPORT_JSON, REPORT_TXT] {
            assert!(out.path().join(f).exists(), "{f}");
        }
        let ts = find_transcripts(&out.path().join(TRANSCRIPTS_DIR)).unwrap();
        assert_eq!(ts.len(), 6);
        let stored: Vec<GradeRecord> = read_lines(&out.path().join(GRADES_FILE)).unwrap();
        let (again, skipped) = regrade(&ts, &settings.grade, Stage::Priming).unwrap();
        assert_eq!(skipped, 0);
        let mut stored_sorted = stored.clone();
        stored_sorted.sort_by(|a, b| (&a.question_id, a.rollout).cmp(&(&b.question_id, b.rollout)));
        assert_eq!(again, stored_sorted);
        let outcomes: Vec<CaseOutcome> = read_lines(&out.path().join(OUTCOMES_FILE)).unwrap();
        assert_eq!(outcomes.len(), 6);
        assert!(outcomes[0].case_id.ends_with("/0"));
    }
}
