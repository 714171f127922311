//! `flforge`: ingest telemetry, detect failures, roll out localization
//! policies, grade them and report.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flforge_core::batch::{
    find_transcripts, read_lines, regrade, run_batch_to_dir, write_grades, write_report, BatchError, BatchSettings,
    OUTCOMES_FILE, TRANSCRIPTS_DIR,
};
use flforge_core::episode::{run_episode, write_transcript, EpisodeConfig, EpisodeError, TranscriptMeta};
use flforge_core::eval::{CaseOutcome, EvalError, EvalReport};
use flforge_core::graders::{stage_grade, GradeConfig, GraderError, PathCache, Stage};
use flforge_core::pipeline::{load_dir, CaseSelection, Dataset, LoadOptions, PipelineError};
use flforge_core::policy::{PolicyDescriptor, PolicyError};
use flforge_core::synth::{gen_suite_with, Preset, SuiteOptions, SynthError, LABEL_FILE, MANIFEST_FILE};
use flforge_core::telemetry::{IngestReport, MetricStore, TelemetryError, TraceStore};

const RUN_CONFIG_FILE: &str = "run_config.json";
const RUN_CONFIG_SCHEMA: &str = "flforge-run/1";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Grader(#[from] GraderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 2 for bad inputs or configuration, 1 for failures during a run.
    fn exit_code(&self) -> u8 {
        let input = match self {
            CliError::Input(_) | CliError::Synth(_) | CliError::Telemetry(_) | CliError::Grader(_) => true,
            CliError::Pipeline(p) | CliError::Batch(BatchError::Pipeline(p)) => p.is_input_error(),
            CliError::Batch(BatchError::Grader(_) | BatchError::Transcript(_) | BatchError::Json { .. }) => true,
            CliError::Episode(EpisodeError::InvalidConfig(_)) => true,
            _ => false,
        };
        if input {
            2
        } else {
            1
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        PipelineError::from(e).into()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Parser)]
#[command(name = "flforge", version, about = "Failure-localization episodes over microservice telemetry")]
struct Cli {
    /// Worker threads for loading and rollouts (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate trace and metric files and report quarantined rows.
    Ingest(IngestArgs),
    /// Flag anomalous requests in a scenario or suite directory.
    Detect(DetectArgs),
    /// Run one episode and print its transcript.
    Episode(EpisodeArgs),
    /// Roll out a policy over every selected case, grade and report.
    Batch(BatchArgs),
    /// Re-grade stored transcripts under a (possibly different) configuration.
    Grade(GradeArgs),
    /// Generate a labeled synthetic scenario suite.
    Synth(SynthArgs),
    /// Compute Recall@k and MRR from an outcomes file.
    Eval(EvalArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Write the ingest reports as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Select {
    /// First labeled case per scenario when labels exist, otherwise all.
    #[default]
    Auto,
    All,
    FirstLabeled,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Scenario directory (traces.csv, metrics.csv, optional label.json) or
    /// suite directory (manifest.json).
    data: PathBuf,
    /// Entry-latency factor over the baseline mean that flags a request.
    #[arg(long)]
    factor: Option<f64>,
    /// Metric baseline window as `START,END` in seconds (default: whole range).
    #[arg(long, value_parser = parse_window)]
    baseline_window: Option<(i64, i64)>,
    #[arg(long, value_enum, default_value_t = Select::Auto)]
    select: Select,
}

fn parse_window(s: &str) -> Result<(i64, i64), String> {
    let (a, b) = s.split_once(',').ok_or("expected START,END")?;
    let a = a.trim().parse::<i64>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<i64>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

impl DataArgs {
    fn load_options(&self) -> LoadOptions {
        let mut opts = LoadOptions { metric_baseline_window: self.baseline_window, ..Default::default() };
        if let Some(f) = self.factor {
            opts.detect.factor = f;
        }
        opts.selection = match self.select {
            Select::All => CaseSelection::All,
            Select::FirstLabeled => CaseSelection::FirstLabeled,
            Select::Auto if has_labels(&self.data) => CaseSelection::FirstLabeled,
            Select::Auto => CaseSelection::All,
        };
        opts
    }
}

fn has_labels(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).exists() || dir.join(LABEL_FILE).exists()
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Write the selected cases as JSON lines here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// greedy, greedy@T, oracle, random, mock:<script>, remote[:model].
    #[arg(long, default_value = "greedy")]
    policy: String,
    /// Chat-completions endpoint for remote policies.
    #[arg(long)]
    endpoint: Option<String>,
    /// Depth budget per episode.
    #[arg(long, default_value_t = 10)]
    d_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PolicyArgs {
    fn descriptor(&self) -> Result<PolicyDescriptor, CliError> {
        let mut d: PolicyDescriptor = self.policy.parse()?;
        if let (PolicyDescriptor::Remote(cfg), Some(e)) = (&mut d, &self.endpoint) {
            cfg.endpoint = e.clone();
        }
        Ok(d)
    }

    fn episode(&self) -> EpisodeConfig {
        EpisodeConfig { d_max: self.d_max, seed: self.seed, ..Default::default() }
    }
}

#[derive(Args)]
struct EpisodeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Trace id of the case (default: the first selected case).
    #[arg(long)]
    case: Option<String>,
    /// Write the transcript here instead of stdout.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args)]
struct BatchArgs {
    /// Data directory; required unless replaying with --config.
    data: Option<PathBuf>,
    /// Output directory for transcripts, grades, exports and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replay a previous run from its run_config.json.
    #[arg(long, conflicts_with_all = ["data", "policy", "k", "stage", "grader_config"])]
    config: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    stage: Option<Stage>,
    /// TOML grader configuration.
    #[arg(long)]
    grader_config: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    d_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Softmax temperature for group weights in the export.
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    per_level: bool,
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long, value_parser = parse_window)]
    baseline_window: Option<(i64, i64)>,
    #[arg(long, value_enum, default_value_t = Select::Auto)]
    select: Select,
}

/// Everything needed to reproduce a batch run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunConfig {
    schema: String,
    data: PathBuf,
    load: LoadOptions,
    settings: BatchSettings,
}

#[derive(Args)]
struct GradeArgs {
    /// Batch output directory or a directory of transcripts.
    dir: PathBuf,
    #[arg(long)]
    grader_config: Option<PathBuf>,
    #[arg(long, default_value = "refinement")]
    stage: Stage,
    /// Where to write grades (default: DIR/regrades.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "small")]
    preset: Preset,
    /// Number of scenarios.
    #[arg(long, default_value_t = 6)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Requests per scenario.
    #[arg(long, default_value_t = 1000)]
    requests: usize,
    /// Fault window length in seconds.
    #[arg(long, default_value_t = 60)]
    window_secs: i64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// outcomes.jsonl, or a batch output directory containing one.
    outcomes: PathBuf,
    #[arg(long)]
    per_level: bool,
    /// Also write report.json / report.txt into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        // only fails if a pool already exists, which cannot happen this early
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Detect(a) => detect(a),
        Command::Episode(a) => episode(a),
        Command::Batch(a) => batch(a, jobs),
        Command::Grade(a) => grade(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn print_ingest(kind: &str, r: &IngestReport) {
    println!("{kind}: {} rows read, {} accepted, {} quarantined", r.rows_read, r.accepted, r.quarantined_count());
    for q in r.quarantined.iter().take(10) {
        println!("  row {}: {}", q.row, q.reason);
    }
    if r.quarantined_count() > 10 {
        println!("  ... {} more", r.quarantined_count() - 10);
    }
}

fn ingest(a: IngestArgs) -> Result<(), CliError> {
    if a.traces.is_none() && a.metrics.is_none() {
        return Err(CliError::Input("give --traces and/or --metrics".into()));
    }
    let mut reports = serde_json::Map::new();
    if let Some(p) = &a.traces {
        let store = TraceStore::ingest_path(p)?;
        print_ingest("traces", store.report());
        println!("  {} traces, {} spans", store.trace_count(), store.span_count());
        reports.insert("traces".into(), serde_json::to_value(store.report()).expect("reports serialize"));
    }
    if let Some(p) = &a.metrics {
        let store = MetricStore::ingest_path(p)?;
        print_ingest("metrics", store.report());
        println!("  {} series", store.len());
        reports.insert("metrics".into(), serde_json::to_value(store.report()).expect("reports serialize"));
    }
    if let Some(out) = &a.report {
        write_json(out, &reports)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("values serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn detect(a: DetectArgs) -> Result<(), CliError> {
    let datasets = load_dir(&a.data.data, &a.data.load_options())?;
    let mut lines = String::new();
    for d in &datasets {
        println!(
            "{}: {} traces, {} flagged, {} selected, {} malformed",
            d.name,
            d.env.traces.trace_count(),
            d.detection.cases.len(),
            d.cases.len(),
            d.detection.malformed.len()
        );
        for c in &d.cases {
            println!("  {} {} {:?}", c.trace_id, c.entry_span.service, c.trigger);
            lines.push_str(&serde_json::to_string(c).expect("cases serialize"));
            lines.push('\n');
        }
    }
    if let Some(out) = &a.out {
        fs::write(out, lines).map_err(io_err(out))?;
    }
    Ok(())
}

fn episode(a: EpisodeArgs) -> Result<(), CliError> {
    let datasets = load_dir(&a.data.data, &a.data.load_options())?;
    let found = datasets.iter().find_map(|d| {
        d.cases.iter().find(|c| a.case.as_deref().is_none_or(|id| c.id() == id)).map(|c| (d, c))
    });
    let Some((dataset, case)) = found else {
        return Err(CliError::Input(match &a.case {
            Some(id) => format!("no selected case with trace id `{id}`"),
            None => "no failure cases detected".into(),
        }));
    };
    let descriptor = a.policy.descriptor()?;
    let res = dataset.policy_resources();
    let policy = descriptor.build(&res)?;
    let result = run_episode(case, policy.as_ref(), &dataset.env, &a.policy.episode())?;
    let truth = res.truths.get(case.id()).cloned();
    let meta = TranscriptMeta { question_id: case.id().to_string(), rollout: 0, seed: result.seed, policy: descriptor.to_string(), truth: truth.clone() };
    match &a.transcript {
        Some(p) => {
            let f = fs::File::create(p).map_err(io_err(p))?;
            write_transcript(&result, &meta, BufWriter::new(f)).map_err(BatchError::from)?;
        }
        None => write_transcript(&result, &meta, std::io::stdout().lock()).map_err(BatchError::from)?,
    }
    let ranked: Vec<String> = result.ranked_components().iter().map(ToString::to_string).collect();
    eprintln!("{:?} after {} decisions: [{}]", result.status, result.depth_used, ranked.join(", "));
    if let Some(t) = truth {
        let cache = PathCache::new();
        let (reward, g) = stage_grade(Stage::Refinement, &result, &t, &GradeConfig::default(), Some((&cache, case.id())))?;
        eprintln!("truth {t}: recall {:.3} route {:.3} hallucination {:.3} composite {reward:.3}", g.recall, g.route, g.hallucination);
    }
    Ok(())
}

fn load_grade_config(path: Option<&Path>) -> Result<GradeConfig, CliError> {
    Ok(match path {
        Some(p) => GradeConfig::load(p)?,
        None => GradeConfig::default(),
    })
}

fn batch(a: BatchArgs, jobs: usize) -> Result<(), CliError> {
    let (run, out) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            let run: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            if run.schema != RUN_CONFIG_SCHEMA {
                return Err(CliError::Input(format!("{}: unsupported schema `{}`", p.display(), run.schema)));
            }
            let out = a.out.clone().ok_or_else(|| CliError::Input("--out is required".into()))?;
            (run, out)
        }
        None => {
            let data = a.data.clone().ok_or_else(|| CliError::Input("give a data directory or --config".into()))?;
            let out = a.out.clone().ok_or_else(|| CliError::Input("--out is required".into()))?;
            let pa = PolicyArgs { policy: a.policy.clone().unwrap_or_else(|| "greedy".into()), endpoint: a.endpoint.clone(), d_max: a.d_max, seed: a.seed };
            let da = DataArgs { data: data.clone(), factor: a.factor, baseline_window: a.baseline_window, select: a.select };
            let settings = BatchSettings {
                policy: pa.descriptor()?,
                episode: pa.episode(),
                grade: load_grade_config(a.grader_config.as_deref())?,
                stage: a.stage.unwrap_or(Stage::Refinement),
                k: a.k.unwrap_or(1),
                temperature: a.temperature,
                per_level: a.per_level,
            };
            (RunConfig { schema: RUN_CONFIG_SCHEMA.into(), data, load: da.load_options(), settings }, out)
        }
    };
    if run.settings.k == 0 {
        return Err(CliError::Input("--k must be at least 1".into()));
    }
    run.settings.episode.validate()?;
    let datasets: Vec<Dataset> = load_dir(&run.data, &run.load)?;
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_json(&out.join(RUN_CONFIG_FILE), &run)?;
    let summary = run_batch_to_dir(&datasets, &run.settings, jobs, &out)?;
    println!(
        "{} cases ({} labeled), {} episodes, {} groups exported -> {}",
        summary.cases,
        summary.labeled_cases,
        summary.episodes,
        summary.exported_groups,
        out.display()
    );
    if let Some(r) = &summary.report {
        print!("{}", r.render_table());
    }
    Ok(())
}

fn grade(a: GradeArgs) -> Result<(), CliError> {
    let cfg = load_grade_config(a.grader_config.as_deref())?;
    let nested = a.dir.join(TRANSCRIPTS_DIR);
    let root = if nested.is_dir() { nested } else { a.dir.clone() };
    let transcripts = find_transcripts(&root)?;
    if transcripts.is_empty() {
        return Err(CliError::Input(format!("no transcripts under {}", root.display())));
    }
    let (grades, skipped) = regrade(&transcripts, &cfg, a.stage)?;
    let out = a.out.unwrap_or_else(|| a.dir.join("regrades.jsonl"));
    write_grades(&out, &grades)?;
    let mean = grades.iter().map(|g| g.reward).sum::<f64>() / grades.len().max(1) as f64;
    println!("{} graded ({skipped} without a truth), mean {} reward {mean:.4} -> {}", grades.len(), a.stage, out.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let opts = SuiteOptions { n_requests: a.requests, window_secs: a.window_secs, ..Default::default() };
    let m = gen_suite_with(a.preset, a.n, a.seed, &a.out, &opts)?;
    println!("{} {} scenarios (seed {}) -> {}", m.scenarios.len(), a.preset, a.seed, a.out.display());
    for e in &m.scenarios {
        println!("  {} {:?} on {}", e.dir, e.label.kind, e.label.target);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let path = if a.outcomes.is_dir() { a.outcomes.join(OUTCOMES_FILE) } else { a.outcomes.clone() };
    let outcomes: Vec<CaseOutcome> = read_lines(&path)?;
    if outcomes.is_empty() {
        return Err(CliError::Input(format!("{} has no outcomes", path.display())));
    }
    let report = match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            write_report(&outcomes, a.per_level, dir)?
        }
        None => EvalReport::build(&outcomes, a.per_level)?,
    };
    print!("{}", report.render_table());
    Ok(())
}
