//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary
//! (`harness = false`) so the lines always reach the terminal; exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use flforge_core::batch::{run_batch_to_dir, BatchSettings, GRADES_FILE, OUTCOMES_FILE, REPORT_JSON, REPORT_TXT, ROLLOUTS_FILE};
use flforge_core::episode::{
    run_episode, ActionStep, EpisodeConfig, EpisodeResult, EpisodeStatus, Environment, InferencePath, Observation,
    ObservationPayload, ToolConfig,
};
use flforge_core::eval::{mrr, rank_of_truth, recall_at_k, REPORT_KS};
use flforge_core::graders::{
    composite_grade, diversity_grade, format_grade, hallucination_penalty, path_signature, recall_grade, route_grade,
    DiversityScores, GradeConfig, PathCache, Stage,
};
use flforge_core::grpo::{group_weights, kl_group_check};
use flforge_core::pipeline::{build_dataset, load_dir, run_policy, CaseSelection, Dataset, LoadOptions};
use flforge_core::policy::{
    DecidedAction, MockPolicy, MockScript, Policy, PolicyContext, PolicyDescriptor, RemoteConfig, RemotePolicy,
};
use flforge_core::synth::{gen_scenario, gen_suite, FaultKind, FaultSpec, Preset, ScenarioClock, Topology};
use flforge_core::telemetry::{
    detect_anomalous_traces, DetectConfig, FailureCase, LatencyBaseline, LatencyBaselines, MetricRow, MetricStore,
    SpanRecord, TraceStore, Trigger,
};
use flforge_core::tools::{
    metrics_tool, trace_tool, Action, Candidate, ChildSpanObservation, ChildSpanRow, FinalAnswer, MetricScope,
    MetricsQuery,
};
use flforge_core::{ComponentLevel, ComponentRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

const GRADER_TOL: f64 = 1e-12;
const GRADER_BUDGET: Duration = Duration::from_secs(1);
const STATE_MACHINE_EPISODES: u64 = 1_000;
const STATE_MACHINE_BUDGET: Duration = Duration::from_secs(30);
const HARD_CAP: usize = 20;
const DIVERSITY_PATHS: u64 = 500;
const TOOL_STORE_SPANS: usize = 10_000;
const METRIC_QUERIES: usize = 100;
const SOFTMAX_VECTORS: usize = 1_000;
const SOFTMAX_SUM_TOL: f64 = 1e-12;
const SOFTMAX_SHIFT_TOL: f64 = 1e-12;
const SOFTMAX_COLD_TAU: f64 = 1e-9;
const SOFTMAX_COLD_TOL: f64 = 1e-6;
/// Reordering the inputs reorders the normalizing sum; allow rounding only.
const SOFTMAX_PERM_TOL: f64 = 1e-15;
const EVAL_SETS: usize = 1_000;
const EVAL_TOL: f64 = 1e-12;
const SUITE_SCENARIOS: usize = 50;
const SUITE_SEEDS: u64 = 5;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const DETECT_OUT_OF_WINDOW_MAX: f64 = 0.01;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- fixtures

fn case_with_entry(service: &str, pod: &str, node: &str) -> FailureCase {
    FailureCase {
        trace_id: "t".into(),
        entry_span: SpanRecord {
            trace_id: "t".into(),
            span_id: "root".into(),
            parent_span_id: None,
            timestamp: 1_647_753_157_852,
            duration: 30_000_000,
            service: service.into(),
            instance: pod.into(),
            node: Some(node.into()),
            operation: "HTTP GET /product".into(),
            status: 200,
            protocol: "http".into(),
        },
        trigger: Trigger::LatencyExceeded { ratio: 120.0 },
        window: (1_647_753_097, 1_647_753_217),
    }
}

fn row(service: &str, pod: &str, node: &str) -> ChildSpanRow {
    ChildSpanRow {
        timestamp: 1_647_753_157_900,
        span_id: format!("{pod}-span"),
        service: service.into(),
        instance: pod.into(),
        node: Some(node.into()),
        operation: "Op".into(),
        duration: 100,
        status: 0,
    }
}

/// A trace step whose observation lists `rows`.
fn trace_step(index: usize, rows: Vec<ChildSpanRow>) -> ActionStep {
    let mut params = Map::new();
    params.insert("parent_span_id".into(), json!(format!("p{index}")));
    let obs = ChildSpanObservation { parent_span_id: format!("p{index}"), rows };
    ActionStep {
        index,
        action: DecidedAction::Known(Action::Trace),
        params,
        observation: Observation { text: obs.render(), payload: ObservationPayload::ChildSpans(obs) },
        policy_raw_output: String::new(),
        violations: Vec::new(),
        wall_time: Duration::ZERO,
    }
}

/// Path of `len` trace steps; the truth pod appears (for the first time) at
/// 1-based step `truth_at`, every other step shows a filler pod.
fn path_with_mention(len: usize, truth_at: Option<usize>) -> InferencePath {
    let mut p = InferencePath::new(case_with_entry("frontend", "frontend-0", "node-1"));
    for i in 1..=len {
        let r = if Some(i) == truth_at { row("cartservice", "cartservice-1", "node-2") } else { row("adservice", "adservice-0", "node-3") };
        p.steps.push(trace_step(i, vec![r]));
    }
    p
}

fn answer(cs: &[ComponentRef]) -> FinalAnswer {
    FinalAnswer { candidates: cs.iter().cloned().map(Candidate::from).collect(), printed_by_policy: true }
}

// ------------------------------------------------------ 1. grader exactness

fn grader_exactness() -> Outcome {
    let start = Instant::now();
    let truth = ComponentRef::pod("cartservice-1");
    let mut rows: Vec<(&str, f64, f64)> = Vec::new();

    // recall, r_max = 10; rank is the 0-based position of the truth
    let rec = |rank: Option<i64>, monotone: bool| recall_grade(rank, 10, monotone).unwrap();
    rows.push(("recall r=0", rec(Some(0), false), 1.0));
    rows.push(("recall r=1", rec(Some(1), false), 0.9));
    rows.push(("recall r=5", rec(Some(5), false), 0.5));
    rows.push(("recall r=9", rec(Some(9), false), 0.1));
    rows.push(("recall r=10", rec(Some(10), false), 0.0));
    rows.push(("recall r=11", rec(Some(11), false), 0.1));
    rows.push(("recall r=12", rec(Some(12), false), 0.1));
    rows.push(("recall r=12 monotone", rec(Some(12), true), 0.0));
    rows.push(("recall absent", rec(None, false), 0.0));

    // route, mu = 1, d_max = 10
    let route = |len: usize, at: Option<usize>| route_grade(&path_with_mention(len, at), &truth, 1, 10);
    rows.push(("route L=4 r=2", route(4, Some(2)), 2.0 / 3.0));
    rows.push(("route L=4 r=4", route(4, Some(4)), 1.0));
    rows.push(("route L=3 r=1", route(3, Some(1)), 0.5));
    rows.push(("route L=1 (L<=mu)", route(1, Some(1)), 1.0));
    rows.push(("route L=5 absent", route(5, None), 0.5));
    rows.push(("route L=12 absent", route(12, None), 1.0));
    rows.push(("route empty path", route(0, None), 0.0));

    // hallucination over a path that shows cartservice-1 (and its service/node)
    let path = path_with_mention(2, Some(1));
    let seen_a = ComponentRef::pod("cartservice-1");
    let seen_b = ComponentRef::service("frontend");
    let unseen = ComponentRef::pod("paymentservice-3");
    let unseen2 = ComponentRef::node("node-9");
    let h = |cs: &[ComponentRef], l1: f64, l2: f64| hallucination_penalty(&answer(cs), &path, l1, l2).penalty;
    rows.push(("halluc all observed", h(&[seen_a.clone(), seen_b.clone()], 1.0, 1.0), 0.0));
    rows.push(("halluc 1 of 2 unobserved", h(&[unseen.clone(), seen_a.clone()], 1.0, 1.0), 0.5));
    rows.push(("halluc dup + unobserved", h(&[seen_a.clone(), seen_a.clone(), unseen.clone()], 1.0, 1.0), 2.0 / 3.0));
    rows.push(("halluc empty answer", h(&[], 1.0, 1.0), 0.0));
    rows.push(("halluc 4 unobserved 1 dup", h(&[unseen.clone(), unseen2.clone(), unseen.clone(), ComponentRef::service("x")], 0.5, 0.5), 0.625));

    // composite with alpha = 1, beta = 0.2, gamma = 0.2
    let cfg = GradeConfig { alpha: 1.0, beta: 0.2, gamma: 0.2, ..GradeConfig::default() };
    rows.push(("composite 1,1,0", composite_grade(1.0, 1.0, 0.0, &cfg), 1.2));
    rows.push(("composite .5,.5,.5", composite_grade(0.5, 0.5, 0.5, &cfg), 0.5));
    rows.push(("composite 0,1,1", composite_grade(0.0, 1.0, 1.0, &cfg), 0.0));
    rows.push(("composite .9,2/3,.25", composite_grade(0.9, 2.0 / 3.0, 0.25, &cfg), 59.0 / 60.0));

    let elapsed = start.elapsed();
    let bad: Vec<String> = rows
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > GRADER_TOL)
        .map(|(n, got, want)| format!("{n}: got {got}, want {want}"))
        .collect();
    let pass = bad.is_empty() && rows.len() == 25 && elapsed < GRADER_BUDGET;
    outcome(pass, format!("{} golden rows, {} mismatches {:?}, {:.1?}", rows.len(), bad.len(), bad, elapsed))
}

// ------------------------------------------------- 2. episode state machine

fn small_scenario_dataset(seed: u64, n_requests: usize) -> (Dataset, Vec<SpanRecord>, Vec<MetricRow>) {
    let t = Topology::preset(Preset::Small);
    let s = ScenarioClock::default().start;
    let fault = FaultSpec::standard(ComponentRef::pod("cartservice-0"), FaultKind::LatencyInflation, (s + 1200, s + 1260));
    let sc = gen_scenario(&t, &fault, n_requests, seed).unwrap();
    let ds = build_dataset(
        "state-machine",
        TraceStore::from_records(sc.spans.clone()),
        MetricStore::from_rows(sc.metrics.clone()),
        Some(sc.label.clone()),
        &LoadOptions::default(),
    )
    .unwrap();
    (ds, sc.spans, sc.metrics)
}

fn state_machine() -> Outcome {
    let start = Instant::now();
    let (ds, _, _) = small_scenario_dataset(17, 800);
    if ds.cases.is_empty() {
        return outcome(false, "no failure cases detected in the fixture scenario");
    }
    let policy = MockPolicy::new(MockScript::Random);
    let mut problems = Vec::new();
    let (mut printed, mut forced) = (0, 0);
    for seed in 0..STATE_MACHINE_EPISODES {
        let d_max = 1 + (seed as usize % HARD_CAP);
        let cfg = EpisodeConfig { d_max, seed, ..Default::default() };
        let case = &ds.cases[seed as usize % ds.cases.len()];
        let r = run_episode(case, &policy, &ds.env, &cfg).unwrap();
        let successful_prints = r.path.steps.iter().filter(|s| matches!(s.observation.payload, ObservationPayload::Answer(_))).count();
        let last_is_print = r.path.steps.last().is_some_and(|s| matches!(s.observation.payload, ObservationPayload::Answer(_)));
        let mut fail = |m: String| problems.push(format!("seed {seed}: {m}"));
        if r.depth_used > d_max || r.path.steps.len() > d_max {
            fail(format!("depth {} / steps {} over d_max {d_max}", r.depth_used, r.path.steps.len()));
        }
        if r.path.steps.len() > HARD_CAP {
            fail("steps over hard cap".into());
        }
        let Some(ans) = &r.answer else {
            fail("no final answer".into());
            continue;
        };
        if successful_prints > 1 || (successful_prints == 1 && !last_is_print) {
            fail(format!("{successful_prints} successful prints, last step print: {last_is_print}"));
        }
        let fallback = r.status == EpisodeStatus::Exhausted;
        if fallback != (successful_prints == 0) || ans.printed_by_policy == fallback || r.status == EpisodeStatus::Failed {
            fail(format!("status {:?} with {successful_prints} successful prints", r.status));
        }
        if fallback {
            forced += 1;
        } else {
            printed += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = problems.is_empty() && elapsed < STATE_MACHINE_BUDGET && printed > 0 && forced > 0;
    outcome(
        pass,
        format!(
            "{STATE_MACHINE_EPISODES} episodes ({printed} printed, {forced} fallback), {} violations {:?}, {:.1?}",
            problems.len(),
            problems.iter().take(3).collect::<Vec<_>>(),
            elapsed
        ),
    )
}

// ------------------------------------------------------- 3. diversity grader

fn diversity() -> Outcome {
    let (ds, _, _) = small_scenario_dataset(23, 800);
    let policy = MockPolicy::new(MockScript::Random);
    let scores = DiversityScores::default();
    let cache = PathCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut problems = Vec::new();
    let mut collapsed_checked = 0;
    for i in 0..DIVERSITY_PATHS {
        let cfg = EpisodeConfig { d_max: 1 + (i as usize % 10), seed: 1_000 + i, ..Default::default() };
        let path = run_episode(&ds.cases[i as usize % ds.cases.len()], &policy, &ds.env, &cfg).unwrap().path;
        let q = format!("q{i}");
        let solved = rng.random_bool(0.5);
        let first = diversity_grade(&q, &path, &cache, &scores, solved);
        let want = if solved { scores.novel_solved } else { scores.novel_unsolved };
        if first != want {
            problems.push(format!("path {i}: first submission scored {first}, want {want}"));
        }
        for _ in 0..2 {
            let again = diversity_grade(&q, &path, &cache, &scores, rng.random_bool(0.5));
            if again != scores.repeated {
                problems.push(format!("path {i}: repeat scored {again}"));
            }
        }
        if !path.steps.is_empty() {
            // repeating a step in place must not change the signature
            let mut stuttered = path.clone();
            let at = rng.random_range(0..path.steps.len());
            let copies = rng.random_range(1..4);
            for _ in 0..copies {
                stuttered.steps.insert(at, path.steps[at].clone());
            }
            if path_signature(&stuttered) != path_signature(&path) {
                problems.push(format!("path {i}: consecutive duplicate changed the signature"));
            }
            if diversity_grade(&q, &stuttered, &cache, &scores, true) != scores.repeated {
                problems.push(format!("path {i}: stuttered path was treated as novel"));
            }
            collapsed_checked += 1;
        }
    }
    outcome(
        problems.is_empty() && collapsed_checked > 0,
        format!("{DIVERSITY_PATHS} random paths, {collapsed_checked} dedup checks, {} problems {:?}", problems.len(), problems.iter().take(3).collect::<Vec<_>>()),
    )
}

// ------------------------------------------------------ 4. tool correctness

fn tool_correctness() -> Outcome {
    let (_, spans, metrics) = small_scenario_dataset(31, 4_000);
    // whole traces until the store reaches the target size
    let mut by_trace: BTreeMap<&str, Vec<&SpanRecord>> = BTreeMap::new();
    for s in &spans {
        by_trace.entry(&s.trace_id).or_default().push(s);
    }
    let mut chosen: Vec<SpanRecord> = Vec::new();
    for (_, ss) in by_trace {
        if chosen.len() >= TOOL_STORE_SPANS {
            break;
        }
        chosen.extend(ss.into_iter().cloned());
    }
    if chosen.len() < TOOL_STORE_SPANS {
        return outcome(false, format!("fixture produced only {} spans", chosen.len()));
    }
    let store = TraceStore::from_records(chosen.clone());
    let mut trace_mismatch = 0;
    for s in &chosen {
        let got: BTreeSet<String> = trace_tool(&store, Some(&s.trace_id), &s.span_id).unwrap().rows.into_iter().map(|r| r.span_id).collect();
        let want: BTreeSet<String> = chosen
            .iter()
            .filter(|c| c.trace_id == s.trace_id && c.parent_span_id.as_deref() == Some(s.span_id.as_str()))
            .map(|c| c.span_id.clone())
            .collect();
        if got != want {
            trace_mismatch += 1;
        }
    }

    let env = Environment::new(store, MetricStore::from_rows(metrics.clone()), None, ToolConfig::default()).unwrap();
    // independent two-pass baselines over the whole metric range
    let mut series: BTreeMap<(ComponentLevel, String, String), Vec<(i64, f64)>> = BTreeMap::new();
    for r in &metrics {
        series.entry((r.component_level, r.component_id.clone(), r.metric_name.clone())).or_default().push((r.timestamp, r.value));
    }
    let stats: HashMap<_, (f64, f64)> = series
        .iter()
        .map(|(k, pts)| {
            let n = pts.len() as f64;
            let mean = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let var = pts.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / n;
            (k.clone(), (mean, var.sqrt()))
        })
        .collect();
    let components: Vec<ComponentRef> = env.index.all_components();
    let (lo, hi) = env.metrics.time_range().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut metric_mismatch = Vec::new();
    let mut nonempty = 0;
    for q in 0..METRIC_QUERIES {
        let c = components[rng.random_range(0..components.len())].clone();
        let t0 = rng.random_range(lo..=hi);
        let delta = rng.random_range(15..=900);
        let n = rng.random_range(0.5..4.0);
        let query = MetricsQuery { scope: MetricScope::Component(c.clone()), t0, delta, n };
        let got: BTreeSet<String> = metrics_tool(&env.metrics, &env.baselines, &env.index, &query)
            .unwrap()
            .rows
            .into_iter()
            .map(|r| r.key.metric_name)
            .collect();
        let want: BTreeSet<String> = series
            .iter()
            .filter(|((l, id, _), _)| *l == c.level() && id == c.id())
            .filter(|(k, pts)| {
                let (mean, std) = stats[*k];
                pts.iter().any(|&(t, v)| t >= t0 - delta && t <= t0 + delta && (v - mean).abs() > n * std)
            })
            .map(|((_, _, m), _)| m.clone())
            .collect();
        if !got.is_empty() {
            nonempty += 1;
        }
        if got != want {
            metric_mismatch.push(format!("query {q} ({c}, t0={t0}, δ={delta}, n={n:.2}): got {got:?}, want {want:?}"));
        }
    }
    outcome(
        trace_mismatch == 0 && metric_mismatch.is_empty() && nonempty > 0,
        format!(
            "trace_tool: {} spans, {trace_mismatch} mismatches; metrics_tool: {METRIC_QUERIES} queries ({nonempty} non-empty), {} mismatches {:?}",
            chosen.len(),
            metric_mismatch.len(),
            metric_mismatch.first()
        ),
    )
}

// --------------------------------------------------------- 5. GRPO weights

fn grpo_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut problems = Vec::new();
    let (mut worst_sum, mut worst_shift, mut worst_cold, mut worst_perm) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..SOFTMAX_VECTORS {
        let k = rng.random_range(1..=16);
        let r: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tau = rng.random_range(0.05..8.0);
        let w = group_weights(&r, tau).unwrap();
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let c = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = r.iter().map(|x| x + c).collect();
        let ws = group_weights(&shifted, tau).unwrap();
        worst_shift = worst_shift.max(w.iter().zip(&ws).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        let cold = group_weights(&r, SOFTMAX_COLD_TAU).unwrap();
        worst_cold = worst_cold.max(cold.iter().map(|x| (x - 1.0 / k as f64).abs()).fold(0.0, f64::max));
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let permuted: Vec<f64> = perm.iter().map(|&j| r[j]).collect();
        let wp = group_weights(&permuted, tau).unwrap();
        worst_perm = worst_perm.max(perm.iter().enumerate().map(|(pos, &j)| (wp[pos] - w[j]).abs()).fold(0.0, f64::max));
        // KL: zero on identical inputs, positive otherwise
        let other = group_weights(&shifted.iter().map(|x| x + rng.random_range(-1.0..1.0)).collect::<Vec<_>>(), tau).unwrap();
        let same = kl_group_check(&w, &w, 0.1).unwrap().divergence;
        let diff = kl_group_check(&other, &w, 0.1).unwrap().divergence;
        if same != 0.0 {
            problems.push(format!("vector {i}: KL of identical weights is {same}"));
        }
        if other != w && !(diff > 0.0) {
            problems.push(format!("vector {i}: KL of distinct weights is {diff}"));
        }
        if diff < 0.0 {
            problems.push(format!("vector {i}: negative KL {diff}"));
        }
    }
    let pass = problems.is_empty() && worst_sum <= SOFTMAX_SUM_TOL && worst_shift <= SOFTMAX_SHIFT_TOL && worst_cold <= SOFTMAX_COLD_TOL
        && worst_perm <= SOFTMAX_PERM_TOL;
    outcome(
        pass,
        format!(
            "{SOFTMAX_VECTORS} vectors: max |Σw-1| {worst_sum:.1e}, max shift drift {worst_shift:.1e}, max cold deviation {worst_cold:.1e}, max permutation drift {worst_perm:.1e}, {} problems {:?}",
            problems.len(),
            problems.first()
        ),
    )
}

// ----------------------------------------------------------- 6. eval metrics

fn eval_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    let mut rank_mismatch = 0;
    for _ in 0..EVAL_SETS {
        let n = rng.random_range(1..40);
        let truth = ComponentRef::pod("target-0");
        let mut ranks = Vec::with_capacity(n);
        for _ in 0..n {
            // random answer: the truth at a random position, or absent
            let len = rng.random_range(0..15);
            let mut cs: Vec<ComponentRef> = (0..len).map(|j| ComponentRef::pod(format!("other-{j}"))).collect();
            let expected = if len > 0 && rng.random_bool(0.7) {
                let at = rng.random_range(0..len);
                cs[at] = truth.clone();
                Some(at + 1)
            } else {
                None
            };
            let r = rank_of_truth(&answer(&cs), &truth);
            if r != expected {
                rank_mismatch += 1;
            }
            ranks.push(r);
        }
        for k in REPORT_KS {
            let naive = ranks.iter().filter(|r| matches!(r, Some(x) if *x <= k)).count() as f64 / n as f64;
            worst = worst.max((recall_at_k(&ranks, k).unwrap() - naive).abs());
        }
        let mut naive_mrr = 0.0;
        for x in ranks.iter().flatten() {
            naive_mrr += 1.0 / *x as f64;
        }
        worst = worst.max((mrr(&ranks).unwrap() - naive_mrr / n as f64).abs());
    }
    let golden = mrr(&[Some(1), Some(3), None]).unwrap();
    let golden_ok = (golden - 4.0 / 9.0).abs() <= EVAL_TOL;
    outcome(
        worst <= EVAL_TOL && rank_mismatch == 0 && golden_ok,
        format!("{EVAL_SETS} outcome sets: max deviation {worst:.1e}, {rank_mismatch} rank mismatches; MRR[1,3,∞] = {golden}"),
    )
}

// ------------------------------------------- 7 & 8. suite-based end to end

struct Suite {
    _dir: tempfile::TempDir,
    path: PathBuf,
}

fn paperlike_suite() -> Suite {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().to_path_buf();
    gen_suite(Preset::Paperlike, SUITE_SCENARIOS, 2024, &path).unwrap();
    Suite { _dir: dir, path }
}

fn suite_mrr(ds: &[Dataset], policy: &PolicyDescriptor) -> (f64, f64) {
    let mut recall1 = 0.0;
    let mut total = 0.0;
    for seed in 0..SUITE_SEEDS {
        let cfg = EpisodeConfig { seed, ..Default::default() };
        let runs = run_policy(ds, policy, &cfg, 1, 4).unwrap();
        let ranks: Vec<Option<usize>> = runs
            .iter()
            .map(|r| {
                let truth = r.truth.as_ref().expect("suite cases are labeled");
                r.rollouts[0].answer.as_ref().and_then(|a| rank_of_truth(a, truth))
            })
            .collect();
        total += mrr(&ranks).unwrap();
        recall1 += recall_at_k(&ranks, 1).unwrap();
    }
    (recall1 / SUITE_SEEDS as f64, total / SUITE_SEEDS as f64)
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

fn end_to_end(suite: &Suite) -> Outcome {
    let start = Instant::now();
    let opts = LoadOptions { selection: CaseSelection::FirstLabeled, ..Default::default() };
    let ds = load_dir(&suite.path, &opts).unwrap();
    let missing: Vec<&str> = ds.iter().filter(|d| d.cases.len() != 1).map(|d| d.name.as_str()).collect();
    let (oracle_r1, oracle_mrr) = suite_mrr(&ds, &PolicyDescriptor::Oracle);
    let (_, greedy_mrr) = suite_mrr(&ds, &PolicyDescriptor::default());
    let (_, random_mrr) = suite_mrr(&ds, &PolicyDescriptor::UniformRandom);
    // a uniformly random ranking of C components puts the truth at each
    // position with probability 1/C, so E[1/rank] = H_C / C
    let analytic: f64 =
        ds.iter().map(|d| { let c = d.env.index.all_components().len(); harmonic(c) / c as f64 }).sum::<f64>() / ds.len() as f64;
    let elapsed = start.elapsed();
    let pass = missing.is_empty()
        && oracle_r1 == 1.0
        && oracle_mrr == 1.0
        && greedy_mrr > analytic
        && greedy_mrr > random_mrr
        && elapsed < E2E_BUDGET;
    outcome(
        pass,
        format!(
            "{} scenarios × {SUITE_SEEDS} seeds: oracle R@1 {oracle_r1:.4} MRR {oracle_mrr:.4}; greedy MRR {greedy_mrr:.4} vs random {random_mrr:.4} (analytic {analytic:.4}); scenarios without exactly one case: {missing:?}; {:.1?}",
            ds.len(),
            elapsed
        ),
    )
}

fn anomaly_detection(suite: &Suite) -> Outcome {
    let ds = load_dir(&suite.path, &LoadOptions::default()).unwrap();
    let (mut faulty, mut faulty_flagged, mut outside, mut outside_flagged, mut scenarios) = (0, 0, 0, 0, 0);
    for d in &ds {
        let label = d.label.as_ref().unwrap();
        if label.kind != FaultKind::LatencyInflation || label.magnitude != 200.0 {
            continue;
        }
        scenarios += 1;
        let flagged: HashSet<&str> = d.detection.cases.iter().map(|c| c.trace_id.as_str()).collect();
        let target = &label.target;
        let through: HashSet<&str> = d
            .env
            .traces
            .spans()
            .filter(|s| match target.level() {
                ComponentLevel::Node => s.node.as_deref() == Some(target.id()),
                ComponentLevel::Service => s.service == target.id(),
                ComponentLevel::Pod => s.instance == target.id(),
            })
            .map(|s| s.trace_id.as_str())
            .collect();
        for (tid, spans) in d.env.traces.traces() {
            let entry = spans.entry_spans().next().unwrap();
            let in_window = (label.window.0..=label.window.1).contains(&entry.timestamp_secs());
            if in_window && through.contains(tid) {
                faulty += 1;
                faulty_flagged += flagged.contains(tid) as usize;
            } else if !in_window {
                outside += 1;
                outside_flagged += flagged.contains(tid) as usize;
            }
        }
    }
    let out_rate = outside_flagged as f64 / outside.max(1) as f64;
    outcome(
        faulty > 0 && faulty_flagged == faulty && out_rate < DETECT_OUT_OF_WINDOW_MAX,
        format!("{scenarios} latency scenarios: {faulty_flagged}/{faulty} in-window faulty traces flagged; {outside_flagged}/{outside} out-of-window flagged ({:.3}%)", 100.0 * out_rate),
    )
}

// ------------------------------------------------------ 9. replay determinism

fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn replay_determinism(suite: &Suite) -> Outcome {
    let opts = LoadOptions { selection: CaseSelection::FirstLabeled, ..Default::default() };
    let mut problems = Vec::new();
    let mut files = 0;
    for (policy, stage, k) in [
        (PolicyDescriptor::default(), Stage::Refinement, 1),
        (PolicyDescriptor::Mock { script: "random".into() }, Stage::Exploration, 4),
        (PolicyDescriptor::Greedy { theta: 0.5, error_first: true, temperature: 0.8 }, Stage::Priming, 3),
    ] {
        let settings = BatchSettings { policy: policy.clone(), stage, k, per_level: true, ..Default::default() };
        let runs: Vec<BTreeMap<PathBuf, Vec<u8>>> = (0..2)
            .map(|_| {
                let ds = load_dir(&suite.path, &opts).unwrap();
                let out = tempfile::tempdir().unwrap();
                run_batch_to_dir(&ds, &settings, 4, out.path()).unwrap();
                tree_bytes(out.path())
            })
            .collect();
        for f in [GRADES_FILE, OUTCOMES_FILE, ROLLOUTS_FILE, REPORT_JSON, REPORT_TXT] {
            if !runs[0].contains_key(Path::new(f)) {
                problems.push(format!("{policy}: {f} missing"));
            }
        }
        if runs[0] != runs[1] {
            let differing: Vec<_> = runs[0].keys().filter(|k| runs[0].get(*k) != runs[1].get(*k)).take(3).collect();
            problems.push(format!("{policy}: differing files {differing:?}"));
        }
        files += runs[0].len();
    }
    outcome(problems.is_empty(), format!("3 policy/stage configurations, {files} files compared byte-for-byte, problems {problems:?}"))
}

// -------------------------------------------------- 10. remote-LLM conformance

/// Serves canned chat-completion bodies, one per request, in order.
fn stub_server(bodies: Vec<String>) -> (String, Arc<Mutex<Vec<Value>>>, std::thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = seen.clone();
    let handle = std::thread::spawn(move || {
        for body in bodies {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            seen2.lock().unwrap().push(serde_json::from_slice(&req).unwrap());
            let resp = format!("HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}", body.len());
            stream.write_all(resp.as_bytes()).unwrap();
        }
    });
    (url, seen, handle)
}

fn completion(name: &str, args: Value) -> String {
    json!({
        "id": "stub",
        "object": "chat.completion",
        "choices": [{
            "index": 0,
            "finish_reason": "tool_calls",
            "message": {
                "role": "assistant",
                "content": null,
                "tool_calls": [{"id": "call_0", "type": "function", "function": {"name": name, "arguments": args.to_string()}}]
            }
        }]
    })
    .to_string()
}

fn samples_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/samples")
}

fn remote_conformance() -> Outcome {
    let traces = TraceStore::ingest_path(&samples_dir().join("example_traces.csv")).unwrap();
    let metrics = MetricStore::ingest_path(&samples_dir().join("example_metrics.csv")).unwrap();
    let t0 = 1_647_753_157;
    let env = Environment::new(traces, metrics, Some((t0 - 3600, t0 - 600)), ToolConfig::default()).unwrap();
    let mut baselines = LatencyBaselines::new();
    baselines.insert(("frontend".into(), "HTTP GET /product".into()), LatencyBaseline { mean: 250_000.0, std: 0.0, sample_count: 1 });
    let case = detect_anomalous_traces(&env.traces, &baselines, &DetectConfig::default()).cases.into_iter().next().unwrap();

    // the tool calls of the example conversation, in order
    let calls: Vec<(Action, Value)> = vec![
        (Action::Trace, json!({"parent_span_id": "0a81f08fc9b7dc5d"})),
        (Action::Trace, json!({"parent_span_id": "9063994c3450e63a"})),
        (Action::Trace, json!({"parent_span_id": "eedd72a7aaa04418"})),
        (Action::Metrics, json!({"service_name": "recommendationservice", "timestamp": 1_647_753_157_852i64})),
        (Action::Trace, json!({"parent_span_id": "fb9693f175e5b84f"})),
        (Action::Print, json!({"root_causes": [
            {"service": "recommendationservice"}, {"pod": "recommendationservice-0"},
            {"service": "productcatalogservice"}, {"pod": "productcatalogservice-0"},
            {"service": "currencyservice"}
        ]})),
    ];
    let bodies = calls.iter().map(|(a, args)| completion(a.tool_name(), args.clone())).collect();
    let (url, seen, handle) = stub_server(bodies);
    let policy = RemotePolicy::new(RemoteConfig { endpoint: url, model: "stub".into(), timeout_secs: 10, ..Default::default() }).unwrap();
    let result: EpisodeResult = run_episode(&case, &policy as &dyn Policy, &env, &EpisodeConfig::default()).unwrap();
    handle.join().unwrap();

    let mut problems = Vec::new();
    if result.path.steps.len() != calls.len() || result.status != EpisodeStatus::Printed {
        problems.push(format!("{} steps, status {:?}", result.path.steps.len(), result.status));
    }
    for (step, (action, args)) in result.path.steps.iter().zip(&calls) {
        if step.action != DecidedAction::Known(*action) || Value::Object(step.params.clone()) != *args {
            problems.push(format!("step {}: parsed {} {:?}", step.index, step.action, step.params));
        }
        if step.observation.is_error() {
            problems.push(format!("step {}: {}", step.index, step.observation.text));
        }
    }
    let requests = seen.lock().unwrap();
    for r in requests.iter() {
        let mut keys: Vec<&str> = r.as_object().map(|o| o.keys().map(String::as_str).collect()).unwrap_or_default();
        keys.sort();
        if keys != ["messages", "model", "temperature", "tools"] {
            problems.push(format!("request keys {keys:?}"));
        }
    }
    let format = format_grade(result.path.steps.iter().map(|s| s.policy_raw_output.as_str()));
    let top = result.ranked_components().first().cloned();
    // decide() alone on the same wire bodies
    let ctx_path = InferencePath::new(case.clone());
    let ctx = PolicyContext { path: &ctx_path, seed: 0, allowed: &Action::ALL, depth_left: 10 };
    let (url2, _, h2) = stub_server(vec![completion("search_fluctuating_metrics", calls[3].1.clone())]);
    let direct = RemotePolicy::new(RemoteConfig { endpoint: url2, timeout_secs: 10, ..Default::default() }).unwrap().decide("x", &ctx).unwrap();
    h2.join().unwrap();
    if direct.action != DecidedAction::Known(Action::Metrics) || !direct.violations.is_empty() || direct.int_param("timestamp") != Some(1_647_753_157_852) {
        problems.push(format!("direct decide parsed {:?}", direct));
    }
    outcome(
        problems.is_empty() && format.score == 1.0,
        format!(
            "{} requests served, {} steps replayed, format score {}, top answer {:?}, problems {:?}",
            requests.len(),
            result.path.steps.len(),
            format.score,
            top.map(|c| c.to_string()),
            problems
        ),
    )
}

fn main() {
    let started = Instant::now();
    let suite = paperlike_suite();
    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("grader exactness", Box::new(grader_exactness)),
        ("episode state machine", Box::new(state_machine)),
        ("diversity grader", Box::new(diversity)),
        ("tool correctness", Box::new(tool_correctness)),
        ("GRPO weights", Box::new(grpo_weights)),
        ("eval metrics", Box::new(eval_metrics)),
        ("end-to-end oracle bound", Box::new(|| end_to_end(&suite))),
        ("anomaly detection", Box::new(|| anomaly_detection(&suite))),
        ("replay determinism", Box::new(|| replay_determinism(&suite))),
        ("remote client conformance", Box::new(remote_conformance)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("[{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{} criteria passed in {:.1?}", criteria.len() - failed, criteria.len(), started.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
}
