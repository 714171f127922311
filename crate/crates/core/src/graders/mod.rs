//! Reward graders: recall, route, hallucination, composite, format and
//! diversity, plus the per-stage reward compositions.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::component::ComponentRef;
use crate::episode::{EpisodeResult, InferencePath, ObservationPayload};
use crate::policy::{parse_tool_call, Violation};
use crate::tools::FinalAnswer;

#[derive(Debug, thiserror::Error)]
pub enum GraderError {
    #[error("rank must be non-negative, got {0}")]
    NegativeRank(i64),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("exploration reward needs a diversity score")]
    MissingDiversity,
    #[error("invalid grading configuration: {0}")]
    Config(String),
    #[error("cannot read grading configuration {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("cannot parse grading configuration: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Rewards for the three diversity outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversityScores {
    /// Novel path that solves the case.
    pub novel_solved: f64,
    /// Novel path with a wrong answer.
    pub novel_unsolved: f64,
    /// Path already in the cache.
    pub repeated: f64,
}

impl Default for DiversityScores {
    fn default() -> Self {
        DiversityScores { novel_solved: 1.0, novel_unsolved: 0.5, repeated: 0.1 }
    }
}

/// Convex weights of a two-term stage reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageWeights {
    pub recall: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradeConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r_max: u32,
    /// Route tolerance: truth surfacing in the last `mu` steps scores fully.
    pub mu: u32,
    pub d_max: u32,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Score ranks past `r_max` as 0 instead of `1 / r_max`.
    pub monotone_recall: bool,
    pub diversity: DiversityScores,
    /// Recall and format weights.
    pub priming: StageWeights,
    /// Recall and diversity weights.
    pub exploration: StageWeights,
}

impl Default for GradeConfig {
    fn default() -> Self {
        GradeConfig {
            alpha: 1.0,
            beta: 0.2,
            gamma: 0.2,
            r_max: 10,
            mu: 2,
            d_max: 10,
            lambda1: 0.5,
            lambda2: 0.5,
            monotone_recall: false,
            diversity: DiversityScores::default(),
            priming: StageWeights { recall: 0.7, other: 0.3 },
            exploration: StageWeights { recall: 0.6, other: 0.4 },
        }
    }
}

impl GradeConfig {
    pub fn validate(&self) -> Result<(), GraderError> {
        let bad = |m: &str| Err(GraderError::Config(m.to_string()));
        if self.r_max < 1 {
            return bad("r_max must be at least 1");
        }
        if self.d_max < 1 {
            return bad("d_max must be at least 1");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be non-negative");
        }
        let d = &self.diversity;
        if !(d.novel_solved > d.novel_unsolved && d.novel_unsolved > d.repeated && d.repeated >= 0.0) {
            return bad("diversity scores must satisfy novel_solved > novel_unsolved > repeated >= 0");
        }
        let finite = [self.alpha, self.beta, self.gamma, self.priming.recall, self.priming.other, self.exploration.recall, self.exploration.other];
        if finite.iter().any(|x| !x.is_finite()) {
            return bad("weights must be finite");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, GraderError> {
        let cfg: GradeConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, GraderError> {
        let text = std::fs::read_to_string(path).map_err(|source| GraderError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// `1 - r/r_max` for `r <= r_max`, `1/r_max` beyond (0 when
/// `monotone`), 0 when the truth is absent. `rank` is 0-based.
pub fn recall_grade(rank: Option<i64>, r_max: u32, monotone: bool) -> Result<f64, GraderError> {
    let Some(r) = rank else { return Ok(0.0) };
    if r < 0 {
        return Err(GraderError::NegativeRank(r));
    }
    let r_max_f = f64::from(r_max.max(1));
    Ok(if r <= i64::from(r_max) {
        1.0 - r as f64 / r_max_f
    } else if monotone {
        0.0
    } else {
        1.0 / r_max_f
    })
}

/// 1-based index of the first step whose structured observation mentions
/// `truth`.
pub fn first_mention(path: &InferencePath, truth: &ComponentRef) -> Option<usize> {
    path.steps.iter().position(|s| step_mentions(&s.observation.payload, truth)).map(|i| i + 1)
}

fn step_mentions(payload: &ObservationPayload, truth: &ComponentRef) -> bool {
    match payload {
        ObservationPayload::ChildSpans(o) => o.rows.iter().any(|r| r.components().any(|c| &c == truth)),
        ObservationPayload::Fluctuations(o) => o.rows.iter().any(|r| r.components().any(|c| &c == truth)),
        _ => false,
    }
}

/// `min(r / (L - mu), 1)` when the truth surfaces at step `r` (1 when
/// `L <= mu`), else `min(L / d_max, 1)`. An empty path scores 0.
pub fn route_grade(path: &InferencePath, truth: &ComponentRef, mu: u32, d_max: u32) -> f64 {
    let l = path.steps.len();
    if l == 0 {
        return 0.0;
    }
    match first_mention(path, truth) {
        Some(r) => {
            let mu = mu as usize;
            if l <= mu {
                1.0
            } else {
                (r as f64 / (l - mu) as f64).min(1.0)
            }
        }
        None => (l as f64 / f64::from(d_max.max(1))).min(1.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HallucinationBreakdown {
    pub penalty: f64,
    pub unobserved: usize,
    pub duplicates: usize,
    pub total: usize,
    pub empty_answer: bool,
}

/// `lambda1 * N_inv / N + lambda2 * N_dup / N`. Candidates count as
/// observed when they are an entry-span component or appear in a trace or
/// fluctuation row. Empty answers score 0 and are flagged.
pub fn hallucination_penalty(answer: &FinalAnswer, path: &InferencePath, lambda1: f64, lambda2: f64) -> HallucinationBreakdown {
    let total = answer.len();
    if total == 0 {
        return HallucinationBreakdown { penalty: 0.0, unobserved: 0, duplicates: 0, total, empty_answer: true };
    }
    let observed = path.observed_components();
    let unobserved = answer.components().filter(|c| !observed.contains(*c)).count();
    let mut seen = HashSet::new();
    let duplicates = answer.components().filter(|c| !seen.insert(*c)).count();
    let n = total as f64;
    let penalty = lambda1 * unobserved as f64 / n + lambda2 * duplicates as f64 / n;
    HallucinationBreakdown { penalty, unobserved, duplicates, total, empty_answer: false }
}

/// `alpha * R + beta * P - gamma * H`.
pub fn composite_grade(recall: f64, route: f64, hallucination: f64, cfg: &GradeConfig) -> f64 {
    cfg.alpha * recall + cfg.beta * route - cfg.gamma * hallucination
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatReport {
    pub score: f64,
    /// (1-based decision index, violation)
    pub violations: Vec<(usize, Violation)>,
}

/// Mean per-decision compliance, where each decision loses the summed
/// weights of its violations (floored at 0). No decisions scores 0.
pub fn format_grade<'a>(raw_outputs: impl IntoIterator<Item = &'a str>) -> FormatReport {
    let mut total = 0.0;
    let mut n = 0usize;
    let mut violations = Vec::new();
    for (i, raw) in raw_outputs.into_iter().enumerate() {
        let d = parse_tool_call(raw);
        let lost: f64 = d.violations.iter().map(Violation::weight).sum();
        total += 1.0 - lost.min(1.0);
        n += 1;
        violations.extend(d.violations.into_iter().map(|v| (i + 1, v)));
    }
    let score = if n == 0 { 0.0 } else { (total / n as f64).clamp(0.0, 1.0) };
    FormatReport { score, violations }
}

/// Hash of the (tool, params) sequence with consecutive repeats collapsed.
pub fn path_signature(path: &InferencePath) -> String {
    let mut calls: Vec<(String, String)> = Vec::new();
    for s in &path.steps {
        let call = (s.action.label().to_string(), serde_json::Value::Object(s.params.clone()).to_string());
        if calls.last() != Some(&call) {
            calls.push(call);
        }
    }
    let mut h = Sha256::new();
    for (name, params) in &calls {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(params.as_bytes());
        h.update([0xffu8]);
    }
    hex::encode(h.finalize())
}

/// Per-question set of path signatures seen during a run.
#[derive(Debug, Default)]
pub struct PathCache {
    inner: Mutex<HashMap<String, HashSet<String>>>,
}

impl PathCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `signature` under `question_id`; true when it was new.
    pub fn insert(&self, question_id: &str, signature: &str) -> bool {
        let mut map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(question_id.to_string()).or_default().insert(signature.to_string())
    }

    pub fn contains(&self, question_id: &str, signature: &str) -> bool {
        let map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        map.get(question_id).is_some_and(|s| s.contains(signature))
    }

    pub fn len(&self, question_id: &str) -> usize {
        let map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        map.get(question_id).map_or(0, HashSet::len)
    }
}

/// Novel and solved, novel and unsolved, or repeated. Novel paths are added
/// to the cache; the check and insert are atomic.
pub fn diversity_grade(question_id: &str, path: &InferencePath, cache: &PathCache, scores: &DiversityScores, solved: bool) -> f64 {
    if !cache.insert(question_id, &path_signature(path)) {
        scores.repeated
    } else if solved {
        scores.novel_solved
    } else {
        scores.novel_unsolved
    }
}

/// Training stage whose reward is being computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Priming,
    Exploration,
    Refinement,
}

impl FromStr for Stage {
    type Err = GraderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "priming" => Ok(Stage::Priming),
            "exploration" => Ok(Stage::Exploration),
            "refinement" => Ok(Stage::Refinement),
            other => Err(GraderError::UnknownStage(other.to_string())),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Priming => "priming",
            Stage::Exploration => "exploration",
            Stage::Refinement => "refinement",
        })
    }
}

/// Every grader's output for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeBreakdown {
    pub recall: f64,
    pub route: f64,
    pub hallucination: f64,
    pub format: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diversity: Option<f64>,
    pub composite: f64,
    /// 0-based.
    pub rank_of_truth: Option<usize>,
    pub empty_answer: bool,
    pub violations: Vec<(usize, Violation)>,
}

impl GradeBreakdown {
    pub fn solved(&self) -> bool {
        self.rank_of_truth == Some(0)
    }
}

/// 0-based position of the first candidate equal to `truth`.
pub fn truth_rank(answer: &FinalAnswer, truth: &ComponentRef) -> Option<usize> {
    answer.components().position(|c| c == truth)
}

/// Grades one episode. The diversity grader runs (and updates `cache`) only
/// when a cache is supplied.
pub fn grade_episode(
    result: &EpisodeResult,
    truth: &ComponentRef,
    cfg: &GradeConfig,
    cache: Option<(&PathCache, &str)>,
) -> GradeBreakdown {
    let empty = FinalAnswer { candidates: Vec::new(), printed_by_policy: false };
    let answer = result.answer.as_ref().unwrap_or(&empty);
    let rank = truth_rank(answer, truth);
    let recall = recall_grade(rank.map(|r| r as i64), cfg.r_max, cfg.monotone_recall).expect("rank is non-negative");
    let route = route_grade(&result.path, truth, cfg.mu, cfg.d_max);
    let h = hallucination_penalty(answer, &result.path, cfg.lambda1, cfg.lambda2);
    let format = format_grade(result.path.steps.iter().map(|s| s.policy_raw_output.as_str()));
    let diversity = cache.map(|(c, q)| diversity_grade(q, &result.path, c, &cfg.diversity, rank == Some(0)));
    GradeBreakdown {
        recall,
        route,
        hallucination: h.penalty,
        format: format.score,
        diversity,
        composite: composite_grade(recall, route, h.penalty, cfg),
        rank_of_truth: rank,
        empty_answer: h.empty_answer,
        violations: format.violations,
    }
}

/// Stage reward from a breakdown: recall+format, recall+diversity, or the
/// composite score.
pub fn stage_reward(stage: Stage, g: &GradeBreakdown, cfg: &GradeConfig) -> Result<f64, GraderError> {
    Ok(match stage {
        Stage::Priming => cfg.priming.recall * g.recall + cfg.priming.other * g.format,
        Stage::Exploration => {
            let d = g.diversity.ok_or(GraderError::MissingDiversity)?;
            cfg.exploration.recall * g.recall + cfg.exploration.other * d
        }
        Stage::Refinement => g.composite,
    })
}

/// Grades an episode and returns its reward for `stage`. Exploration needs
/// the path cache and question id.
pub fn stage_grade(
    stage: Stage,
    result: &EpisodeResult,
    truth: &ComponentRef,
    cfg: &GradeConfig,
    cache: Option<(&PathCache, &str)>,
) -> Result<(f64, GradeBreakdown), GraderError> {
    if stage == Stage::Exploration && cache.is_none() {
        return Err(GraderError::MissingDiversity);
    }
    let g = grade_episode(result, truth, cfg, if stage == Stage::Exploration { cache } else { None });
    Ok((stage_reward(stage, &g, cfg)?, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::tests::example_env;
    use crate::episode::{run_episode, EpisodeConfig};
    use crate::policy::{Decision, GreedyPolicy, MockPolicy, MockScript};
    use crate::tools::Candidate;

    fn answer(cs: &[ComponentRef]) -> FinalAnswer {
        FinalAnswer { candidates: cs.iter().cloned().map(Candidate::from).collect(), printed_by_policy: true }
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_grade(Some(0), 10, false).unwrap(), 1.0);
        assert_eq!(recall_grade(Some(5), 10, false).unwrap(), 0.5);
        assert_eq!(recall_grade(Some(10), 10, false).unwrap(), 0.0);
        assert_eq!(recall_grade(Some(12), 10, false).unwrap(), 0.1);
        assert_eq!(recall_grade(Some(12), 10, true).unwrap(), 0.0);
        assert_eq!(recall_grade(None, 10, false).unwrap(), 0.0);
        assert!(matches!(recall_grade(Some(-1), 10, false), Err(GraderError::NegativeRank(-1))));
    }

    #[test]
    fn composite_examples() {
        let cfg = GradeConfig::default();
        assert!((composite_grade(1.0, 1.0, 0.0, &cfg) - 1.2).abs() < 1e-12);
        assert!((composite_grade(0.0, 0.0, 1.0, &cfg) + 0.2).abs() < 1e-12);
        assert!((composite_grade(0.5, 0.5, 0.25, &cfg) - 0.55).abs() < 1e-12);
    }

    #[test]
    fn hallucination_examples() {
        let (env, case) = example_env();
        let r = run_episode(&case, &MockPolicy::new(MockScript::TraceEntry), &env, &EpisodeConfig { d_max: 1, ..Default::default() }).unwrap();
        let path = &r.path;
        let a = ComponentRef::service("frontend");
        let b = ComponentRef::pod("frontend2-0");
        let ghost = ComponentRef::service("ghost");
        assert_eq!(hallucination_penalty(&answer(&[a.clone(), b.clone()]), path, 0.5, 0.5).penalty, 0.0);
        let h = hallucination_penalty(&answer(&[a.clone(), ghost, b, a.clone()]), path, 0.5, 0.5);
        assert_eq!((h.unobserved, h.duplicates, h.total), (1, 1, 4));
        assert_eq!(h.penalty, 0.25);
        let h = hallucination_penalty(&answer(&[a.clone(), a.clone(), a]), path, 0.5, 0.5);
        assert_eq!(h.duplicates, 2);
        assert!((h.penalty - 1.0 / 3.0).abs() < 1e-15);
        let h = hallucination_penalty(&answer(&[]), path, 0.5, 0.5);
        assert!(h.empty_answer);
        assert_eq!(h.penalty, 0.0);
    }

    #[test]
    fn route_branches() {
        let (env, case) = example_env();
        let script = |n: usize| {
            let mut s: Vec<Decision> = vec![Decision::trace(case.entry_span.span_id.clone())];
            s.extend((1..n).map(|_| Decision::trace("12552d251b74a1a4")));
            MockScript::Steps(s)
        };
        let run = |n: usize| run_episode(&case, &MockPolicy::new(script(n)), &env, &EpisodeConfig { d_max: n, ..Default::default() }).unwrap();
        // truth surfaces at step 1 (the entry's children include frontend2-0)
        let r6 = run(6);
        assert_eq!(route_grade(&r6.path, &ComponentRef::pod("frontend2-0"), 2, 10), 0.25);
        assert_eq!(route_grade(&r6.path, &ComponentRef::service("ghost"), 2, 10), 0.6);
        let r5 = run(5);
        assert_eq!(route_grade(&r5.path, &ComponentRef::service("ghost"), 2, 10), 0.5);
        let r2 = run(2);
        assert_eq!(route_grade(&r2.path, &ComponentRef::pod("frontend2-0"), 2, 10), 1.0);
    }

    #[test]
    fn format_examples() {
        assert_eq!(format_grade([r#"{"name":"search_traces","arguments":{"parent_span_id":"a"}}"#]).score, 1.0);
        let bad = format_grade([r#"{"name":"print_results","arguments":{"root_causes":[{"svc":"x"}]}}"#]);
        assert!(bad.score < 1.0);
        assert_eq!(bad.violations[0].1.to_string(), "root cause element 0 missing node/service/pod attribute");
        assert_eq!(format_grade(["nope", r#"{"arguments":{}}"#]).score, 0.0);
    }

    #[test]
    fn diversity_sequence() {
        let (env, case) = example_env();
        let r = run_episode(&case, &GreedyPolicy::default(), &env, &EpisodeConfig::default()).unwrap();
        let cache = PathCache::new();
        let s = DiversityScores::default();
        assert_eq!(diversity_grade("q", &r.path, &cache, &s, true), 1.0);
        assert_eq!(diversity_grade("q", &r.path, &cache, &s, true), 0.1);
        assert_eq!(diversity_grade("other", &r.path, &cache, &s, false), 0.5);
        assert_eq!(cache.len("q"), 1);
    }

    #[test]
    fn consecutive_repeats_collapse() {
        let (env, case) = example_env();
        let e = case.entry_span.span_id.clone();
        let run = |s: Vec<Decision>| {
            let n = s.len();
            run_episode(&case, &MockPolicy::new(MockScript::Steps(s)), &env, &EpisodeConfig { d_max: n, ..Default::default() }).unwrap().path
        };
        let once = run(vec![Decision::trace(e.clone()), Decision::trace("9063994c3450e63a")]);
        let twice = run(vec![Decision::trace(e.clone()), Decision::trace(e.clone()), Decision::trace("9063994c3450e63a")]);
        let apart = run(vec![Decision::trace(e.clone()), Decision::trace("9063994c3450e63a"), Decision::trace(e)]);
        assert_eq!(path_signature(&once), path_signature(&twice));
        assert_ne!(path_signature(&once), path_signature(&apart));
    }

    #[test]
    fn stage_examples() {
        let cfg = GradeConfig::default();
        let g = |recall, format, diversity, composite| GradeBreakdown {
            recall,
            route: 0.0,
            hallucination: 0.0,
            format,
            diversity,
            composite,
            rank_of_truth: None,
            empty_answer: false,
            violations: vec![],
        };
        assert!((stage_reward(Stage::Priming, &g(1.0, 1.0, None, 0.0), &cfg).unwrap() - 1.0).abs() < 1e-12);
        assert!((stage_reward(Stage::Exploration, &g(0.5, 0.0, Some(1.0), 0.0), &cfg).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(stage_reward(Stage::Refinement, &g(1.0, 1.0, None, 1.2), &cfg).unwrap(), 1.2);
        assert!(stage_reward(Stage::Exploration, &g(0.5, 0.0, None, 0.0), &cfg).is_err());
        assert!("warmup".parse::<Stage>().is_err());
    }

    #[test]
    fn greedy_transcripts_are_format_clean() {
        let (env, case) = example_env();
        let r = run_episode(&case, &GreedyPolicy::default(), &env, &EpisodeConfig::default()).unwrap();
        let g = grade_episode(&r, &ComponentRef::pod("recommendationservice2-0"), &GradeConfig::default(), None);
        assert_eq!(g.format, 1.0);
        assert_eq!(g.rank_of_truth, Some(2));
        assert_eq!(g.hallucination, 0.0);
    }

    #[test]
    fn config_toml_and_validation() {
        let cfg = GradeConfig::from_toml("r_max = 5\nmonotone_recall = true\n[diversity]\nrepeated = 0.05\n").unwrap();
        assert_eq!(cfg.r_max, 5);
        assert_eq!(cfg.diversity.novel_solved, 1.0);
        assert_eq!(cfg.diversity.repeated, 0.05);
        assert!(GradeConfig::from_toml("r_max = 0").is_err());
        assert!(GradeConfig::from_toml("[diversity]\nnovel_unsolved = 2.0").is_err());
        assert!(GradeConfig::from_toml("lamda1 = 0.5").is_err());
        assert!(GradeConfig::from_toml("[priming]\nrecal = 0.7\nother = 0.3").is_err());
        assert_ne!(cfg.digest(), GradeConfig::default().digest());
        assert_eq!(GradeConfig::default().digest(), GradeConfig::default().digest());
    }
}
