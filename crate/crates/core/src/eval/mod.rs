//! Localization accuracy: Recall@k and MRR over case outcomes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::component::{ComponentLevel, ComponentRef};
use crate::tools::FinalAnswer;

pub const REPORT_KS: [usize; 5] = [1, 2, 3, 5, 10];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no outcomes to evaluate")]
    Empty,
    #[error("k must be at least 1")]
    ZeroK,
}

/// 1-based position of the first candidate equal to `truth`; `None` stands
/// for an infinite rank.
pub fn rank_of_truth(answer: &FinalAnswer, truth: &ComponentRef) -> Option<usize> {
    answer.components().position(|c| c == truth).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub case_id: String,
    pub predicted: FinalAnswer,
    pub truth: ComponentRef,
    /// 1-based; null when the truth is absent.
    pub rank: Option<usize>,
}

impl CaseOutcome {
    pub fn new(case_id: impl Into<String>, predicted: FinalAnswer, truth: ComponentRef) -> Self {
        let rank = rank_of_truth(&predicted, &truth);
        CaseOutcome { case_id: case_id.into(), predicted, truth, rank }
    }
}

/// Fraction of outcomes with rank at most `k`.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
    Ok(hits as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank, with absent truths contributing 0.
pub fn mrr(ranks: &[Option<usize>]) -> Result<f64, EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = ranks.iter().map(|r| r.map_or(0.0, |r| 1.0 / r as f64)).sum();
    Ok(sum / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n_cases: usize,
    /// Keyed by k.
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr: f64,
}

impl Scores {
    pub fn from_ranks(ranks: &[Option<usize>]) -> Result<Self, EvalError> {
        let mut recall_at = BTreeMap::new();
        for k in REPORT_KS {
            recall_at.insert(k, recall_at_k(ranks, k)?);
        }
        Ok(Scores { n_cases: ranks.len(), recall_at, mrr: mrr(ranks)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    /// Breakdown by the truth's level, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub by_level: Option<BTreeMap<ComponentLevel, Scores>>,
}

impl EvalReport {
    pub fn build(outcomes: &[CaseOutcome], per_level: bool) -> Result<Self, EvalError> {
        let ranks: Vec<Option<usize>> = outcomes.iter().map(|o| o.rank).collect();
        let overall = Scores::from_ranks(&ranks)?;
        let by_level = if per_level {
            let mut groups: BTreeMap<ComponentLevel, Vec<Option<usize>>> = BTreeMap::new();
            for o in outcomes {
                groups.entry(o.truth.level()).or_default().push(o.rank);
            }
            Some(groups.into_iter().map(|(l, r)| Scores::from_ranks(&r).map(|s| (l, s))).collect::<Result<_, _>>()?)
        } else {
            None
        };
        Ok(EvalReport { overall, by_level })
    }

    /// Aligned table of percentages with two decimals.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "");
        for k in REPORT_KS {
            let _ = write!(out, "{:>11}", format!("Recall@{k}"));
        }
        let _ = writeln!(out, "{:>9}{:>8}", "MRR", "cases");
        let mut row = |label: &str, s: &Scores| {
            let _ = write!(out, "{label:<10}");
            for k in REPORT_KS {
                let _ = write!(out, "{:>11.2}", 100.0 * s.recall_at[&k]);
            }
            let _ = writeln!(out, "{:>9.2}{:>8}", 100.0 * s.mrr, s.n_cases);
        };
        row("overall", &self.overall);
        if let Some(levels) = &self.by_level {
            for (l, s) in levels {
                row(l.as_str(), s);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::Candidate;

    fn answer(cs: &[ComponentRef]) -> FinalAnswer {
        FinalAnswer { candidates: cs.iter().cloned().map(Candidate::from).collect(), printed_by_policy: true }
    }

    #[test]
    fn rank_examples() {
        let b = ComponentRef::pod("B");
        assert_eq!(rank_of_truth(&answer(&[ComponentRef::service("A"), b.clone()]), &b), Some(2));
        assert_eq!(rank_of_truth(&answer(&[ComponentRef::service("A")]), &b), None);
        assert_eq!(rank_of_truth(&answer(&[b.clone(), b.clone()]), &b), Some(1));
        // granularity must match
        assert_eq!(rank_of_truth(&answer(&[ComponentRef::service("B")]), &b), None);
    }

    #[test]
    fn metric_examples() {
        let ranks = [Some(1), Some(3), None];
        assert!((recall_at_k(&ranks, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((recall_at_k(&ranks, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((mrr(&ranks).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(mrr(&[Some(1); 4]).unwrap(), 1.0);
        assert_eq!(mrr(&[]), Err(EvalError::Empty));
        assert_eq!(recall_at_k(&ranks, 0), Err(EvalError::ZeroK));
    }

    #[test]
    fn report_table() {
        let t = ComponentRef::pod("p");
        let outcomes = vec![
            CaseOutcome::new("a", answer(std::slice::from_ref(&t)), t.clone()),
            CaseOutcome::new("b", answer(&[ComponentRef::node("n"), t.clone()]), t),
            CaseOutcome::new("c", answer(&[]), ComponentRef::service("s")),
        ];
        let r = EvalReport::build(&outcomes, true).unwrap();
        let text = r.render_table();
        assert!(text.contains("Recall@10"));
        assert!(text.lines().nth(1).unwrap().contains("33.33"));
        assert!(text.contains("50.00"));
        let levels = r.by_level.unwrap();
        assert_eq!(levels[&ComponentLevel::Pod].mrr, 0.75);
        assert_eq!(levels[&ComponentLevel::Service].n_cases, 1);
    }
}
