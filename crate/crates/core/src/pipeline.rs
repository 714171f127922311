//! Glue from files on disk to graded localization runs: load telemetry and
//! an optional ground-truth label, detect failure cases, roll out a policy.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::ComponentRef;
use crate::episode::{run_batch, EpisodeConfig, EpisodeError, EpisodeResult, Environment, ToolConfig};
use crate::policy::{PolicyDescriptor, PolicyError, PolicyResources};
use crate::synth::{read_label, read_manifest, ScenarioLabel, SynthError, LABEL_FILE, METRICS_FILE, TRACES_FILE};
use crate::telemetry::{
    detect_anomalous_traces, entry_latency_baselines, DetectConfig, DetectionReport, FailureCase,
    LatencyBaselineConfig, MetricStore, TelemetryError, TraceStore,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Input(String),
}

impl PipelineError {
    /// True for problems with the inputs rather than the run itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            PipelineError::Telemetry(_)
                | PipelineError::Synth(_)
                | PipelineError::Input(_)
                | PipelineError::Policy(PolicyError::Config(_))
                | PipelineError::Episode(EpisodeError::InvalidConfig(_))
        )
    }
}

/// Which detected cases to localize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseSelection {
    /// Every detected case.
    #[default]
    All,
    /// The earliest detected case inside the label window.
    FirstLabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub detect: DetectConfig,
    pub latency_baseline: LatencyBaselineConfig,
    pub tools: ToolConfig,
    /// Metric baseline window in seconds; the whole metric range when unset.
    pub metric_baseline_window: Option<(i64, i64)>,
    pub selection: CaseSelection,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            detect: DetectConfig::default(),
            latency_baseline: LatencyBaselineConfig::default(),
            tools: ToolConfig::default(),
            metric_baseline_window: None,
            selection: CaseSelection::All,
        }
    }
}

/// Telemetry for one scenario (or one recorded dataset) with its cases.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub env: Environment,
    pub detection: DetectionReport,
    /// Cases chosen for localization, in detection order.
    pub cases: Vec<FailureCase>,
    pub label: Option<ScenarioLabel>,
}

impl Dataset {
    /// Ground truth per case id: the label target, for cases whose entry
    /// falls inside the label window.
    pub fn truths(&self) -> BTreeMap<String, ComponentRef> {
        let Some(label) = &self.label else { return BTreeMap::new() };
        self.cases
            .iter()
            .filter(|c| in_label_window(c, label))
            .map(|c| (c.id().to_string(), label.target.clone()))
            .collect()
    }

    pub fn policy_resources(&self) -> PolicyResources {
        PolicyResources { truths: self.truths(), components: self.env.index.all_components() }
    }
}

fn in_label_window(case: &FailureCase, label: &ScenarioLabel) -> bool {
    (label.window.0..=label.window.1).contains(&case.entry_span.timestamp_secs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub traces: PathBuf,
    pub metrics: PathBuf,
    pub label: Option<PathBuf>,
}

impl DatasetPaths {
    /// The generator's layout: `traces.csv`, `metrics.csv`, and `label.json`
    /// when present.
    pub fn scenario_dir(dir: &Path) -> Self {
        let label = dir.join(LABEL_FILE);
        DatasetPaths { traces: dir.join(TRACES_FILE), metrics: dir.join(METRICS_FILE), label: label.exists().then_some(label) }
    }
}

pub fn load_dataset(name: &str, paths: &DatasetPaths, opts: &LoadOptions) -> Result<Dataset, PipelineError> {
    let traces = TraceStore::ingest_path(&paths.traces)?;
    let metrics = MetricStore::ingest_path(&paths.metrics)?;
    let label = paths.label.as_deref().map(read_label).transpose()?;
    build_dataset(name, traces, metrics, label, opts)
}

pub fn build_dataset(
    name: &str,
    traces: TraceStore,
    metrics: MetricStore,
    label: Option<ScenarioLabel>,
    opts: &LoadOptions,
) -> Result<Dataset, PipelineError> {
    let baselines = entry_latency_baselines(&traces, &opts.latency_baseline, &opts.detect);
    let detection = detect_anomalous_traces(&traces, &baselines, &opts.detect);
    let cases = match (opts.selection, &label) {
        (CaseSelection::All, _) => detection.cases.clone(),
        (CaseSelection::FirstLabeled, None) => {
            return Err(PipelineError::Input(format!("{name}: selecting labeled cases needs a label file")))
        }
        (CaseSelection::FirstLabeled, Some(l)) => detection
            .cases
            .iter()
            .filter(|c| in_label_window(c, l))
            .min_by_key(|c| (c.entry_span.timestamp, c.trace_id.clone()))
            .cloned()
            .into_iter()
            .collect(),
    };
    let env = Environment::new(traces, metrics, opts.metric_baseline_window, opts.tools.clone())?;
    Ok(Dataset { name: name.to_string(), env, detection, cases, label })
}

/// Loads either a suite directory (with `manifest.json`) or a single
/// scenario directory.
pub fn load_dir(dir: &Path, opts: &LoadOptions) -> Result<Vec<Dataset>, PipelineError> {
    if dir.join(crate::synth::MANIFEST_FILE).exists() {
        let manifest = read_manifest(dir)?;
        manifest
            .scenarios
            .par_iter()
            .map(|e| load_dataset(&e.label.scenario_id, &DatasetPaths::scenario_dir(&dir.join(&e.dir)), opts))
            .collect()
    } else {
        let name = dir.file_name().map_or_else(|| "dataset".to_string(), |n| n.to_string_lossy().into_owned());
        Ok(vec![load_dataset(&name, &DatasetPaths::scenario_dir(dir), opts)?])
    }
}

/// All rollouts of one case.
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub dataset: String,
    pub case: FailureCase,
    pub truth: Option<ComponentRef>,
    pub rollouts: Vec<EpisodeResult>,
}

/// Runs `k` rollouts of the described policy on every selected case.
pub fn run_policy(
    datasets: &[Dataset],
    policy: &PolicyDescriptor,
    cfg: &EpisodeConfig,
    k: usize,
    jobs: usize,
) -> Result<Vec<CaseRun>, PipelineError> {
    let mut out = Vec::new();
    for d in datasets {
        let res = d.policy_resources();
        let p = policy.build(&res)?;
        let runs = run_batch(&d.cases, p.as_ref(), &d.env, cfg, k, jobs)?;
        for (case, rollouts) in d.cases.iter().zip(runs) {
            out.push(CaseRun { dataset: d.name.clone(), truth: res.truths.get(case.id()).cloned(), case: case.clone(), rollouts });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_suite_with, Preset, SuiteOptions};

    #[test]
    fn suite_loads_with_one_labeled_case_each() {
        let dir = tempfile::tempdir().unwrap();
        gen_suite_with(Preset::Small, 6, 7, dir.path(), &SuiteOptions { n_requests: 400, ..Default::default() }).unwrap();
        let opts = LoadOptions { selection: CaseSelection::FirstLabeled, ..Default::default() };
        let ds = load_dir(dir.path(), &opts).unwrap();
        assert_eq!(ds.len(), 6);
        for d in &ds {
            assert_eq!(d.cases.len(), 1, "{}", d.name);
            assert_eq!(d.truths().len(), 1);
        }
        let runs = run_policy(&ds, &PolicyDescriptor::Oracle, &EpisodeConfig::default(), 1, 2).unwrap();
        for r in &runs {
            assert_eq!(r.rollouts[0].ranked_components().first(), r.truth.as_ref());
        }
    }
}
