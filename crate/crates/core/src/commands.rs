//! Batch entry points behind the command-line tool: task generation,
//! training runs with on-disk artifacts, evaluation of checkpoints and
//! comparison of finished runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::pipeline::{evaluate, run_experiment_with, ExperimentConfig, IterationReport, Method, RunObserver, UpdateRecord};
use crate::policy::PolicyParams;
use crate::synthweb::{transition, EnvState, SiteParams, TaskSuite, DEFAULT_STUCK_RATE, EVAL_MAX_STEPS};
use crate::trajectory::{save_trajectories, StateDataset, TrajectoryRecord};

pub const MANIFEST_FORMAT: &str = "procua-run";
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.tsv";
pub const FINAL_CHECKPOINT: &str = "policy.json";

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- config

fn default_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("default config serializes")
}

/// Keys accepted in a config file.
pub fn config_keys() -> Vec<String> {
    let mut keys: Vec<String> = default_table().keys().cloned().collect();
    keys.push("prm_endpoint".into());
    keys.sort();
    keys
}

fn short_message(e: &toml::de::Error) -> String {
    e.message().trim().to_string()
}

/// Builds a config from a flat table of overrides on top of the defaults.
/// Errors name the offending key.
pub fn config_from_table(user: &toml::Table) -> Result<ExperimentConfig> {
    let known = config_keys();
    for (key, value) in user {
        if !known.contains(key) {
            let reason = if value.is_table() {
                "unknown key (the config is flat; nested tables are not accepted)"
            } else {
                "unknown key"
            };
            return Err(Error::config(key.clone(), reason));
        }
    }
    let mut merged = default_table();
    for (key, value) in user {
        let mut single = default_table();
        single.insert(key.clone(), value.clone());
        if let Err(e) = single.try_into::<ExperimentConfig>() {
            return Err(Error::config(key.clone(), short_message(&e)));
        }
        merged.insert(key.clone(), value.clone());
    }
    let cfg: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("<config>", short_message(&e)))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>().map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
        Error::config(format!("line {line}"), short_message(&e))
    })
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    config_from_table(&parse_table(text)?)
}

/// Parses `key=value`. The value is read as a TOML literal when possible
/// and as a bare string otherwise, so `method=fbc` and `clip_eps=0.1` both
/// work.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table = parse_table(&text)?;
    for o in overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    config_from_table(&table)
}

/// The defaults as a commented config file.
pub fn default_config_text() -> String {
    let mut out = String::from("# procua experiment config. Every key is optional; omitted keys take these defaults.\n");
    out.push_str(&toml::to_string(&ExperimentConfig::default()).expect("default config serializes"));
    out.push_str("# prm_endpoint = \"http://localhost:8000/grade\"\n");
    out
}

// ------------------------------------------------------------- gen-tasks

#[derive(Debug, Clone)]
pub struct GenTasksOptions {
    pub seed: u64,
    pub count: usize,
    pub pages: usize,
    pub branching: usize,
    pub stuck_rate: f64,
    pub prefix: String,
    pub out: PathBuf,
}

impl Default for GenTasksOptions {
    fn default() -> Self {
        GenTasksOptions {
            seed: 1,
            count: 64,
            pages: 20,
            branching: 3,
            stuck_rate: DEFAULT_STUCK_RATE,
            prefix: "task".into(),
            out: PathBuf::from("tasks.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTasksSummary {
    pub tasks: usize,
    pub by_kind: BTreeMap<String, usize>,
    pub golden_steps: usize,
    pub digest: String,
}

/// Replays a task's golden actions through the pure transition and reports
/// whether they reach the goal.
pub fn golden_succeeds(task: &crate::synthweb::Task) -> bool {
    let mut state = EnvState::initial(task, task.golden.len() as u32);
    for g in &task.golden {
        if state.terminal {
            return false;
        }
        state = transition(task, &state, &g.action);
    }
    state.goal_reached(task)
}

pub fn cmd_gen_tasks(opts: &GenTasksOptions) -> Result<GenTasksSummary> {
    if opts.count == 0 {
        return Err(Error::InvalidParams("count must be at least 1".into()));
    }
    let params = SiteParams {
        n_pages: opts.pages,
        branching: opts.branching,
        stuck_rate: opts.stuck_rate,
    };
    let suite = TaskSuite::generate(opts.seed, opts.count, params, &opts.prefix)?;
    let mut by_kind = BTreeMap::new();
    for t in &suite.tasks {
        t.site.validate()?;
        if !golden_succeeds(t) {
            return Err(Error::InvalidParams(format!("golden trajectory of {} does not reach its goal", t.task_id)));
        }
        *by_kind.entry(format!("{:?}", t.kind).to_lowercase()).or_insert(0) += 1;
    }
    suite.save(&opts.out)?;
    Ok(GenTasksSummary {
        tasks: suite.tasks.len(),
        by_kind,
        golden_steps: suite.tasks.iter().map(|t| t.golden.len()).sum(),
        digest: suite.digest(),
    })
}

// ----------------------------------------------------------------- train

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub method: Option<Method>,
    pub workers: Option<usize>,
    pub out: PathBuf,
    /// Also write the raw Stage-1 trajectories of every iteration.
    pub save_trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub metrics: String,
    pub summary: String,
    pub final_checkpoint: String,
    pub checkpoints: Vec<String>,
    pub datasets: Vec<String>,
    #[serde(default)]
    pub trajectories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WallClock {
    pub total_secs: f64,
    pub per_iteration_secs: Vec<f64>,
}

/// Record of a finished training run. Artifact paths are relative to the
/// directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub method: Method,
    pub config: ExperimentConfig,
    pub overrides: Vec<String>,
    pub train_suite_digest: String,
    pub eval_suite_digest: String,
    pub base_success_rate: f64,
    pub final_success_rate: f64,
    pub mean_assigned_reward: Option<f64>,
    pub env_steps: u64,
    pub reports: Vec<IterationReport>,
    pub artifacts: RunArtifacts,
    pub wall_clock: WallClock,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::CorruptRecord {
            line: e.line(),
            reason: e.to_string(),
        })?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                expected: format!("{MANIFEST_FORMAT} v{MANIFEST_VERSION}"),
                found: format!("{} v{}", m.format, m.version),
            });
        }
        Ok(m)
    }

    /// Every artifact path named in the manifest, relative to its directory.
    pub fn artifact_paths(&self) -> Vec<&str> {
        let a = &self.artifacts;
        let mut v = vec![a.metrics.as_str(), a.summary.as_str(), a.final_checkpoint.as_str()];
        v.extend(a.checkpoints.iter().map(String::as_str));
        v.extend(a.datasets.iter().map(String::as_str));
        v.extend(a.trajectories.iter().map(String::as_str));
        v
    }
}

#[derive(Debug, Serialize)]
struct RunSummary {
    method: Method,
    iterations: usize,
    base_success_rate: f64,
    final_success_rate: f64,
    mean_assigned_reward: Option<f64>,
    policy_version: u64,
    env_steps: u64,
}

/// One line of the metrics stream.
#[derive(Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum MetricRecord<'a> {
    Update(&'a UpdateRecord),
    Iteration(&'a IterationReport),
    Summary(&'a RunSummary),
}

struct ArtifactWriter {
    out: PathBuf,
    metrics: BufWriter<fs::File>,
    metrics_path: PathBuf,
    save_trajectories: bool,
    checkpoints: Vec<String>,
    datasets: Vec<String>,
    trajectories: Vec<String>,
    iteration_started: Instant,
    per_iteration_secs: Vec<f64>,
}

impl ArtifactWriter {
    fn new(out: &Path, save_trajectories: bool) -> Result<Self> {
        for sub in ["checkpoints", "datasets"] {
            create_dir(&out.join(sub))?;
        }
        if save_trajectories {
            create_dir(&out.join("trajectories"))?;
        }
        let metrics_path = out.join(METRICS_FILE);
        let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        Ok(ArtifactWriter {
            out: out.to_path_buf(),
            metrics: BufWriter::new(file),
            metrics_path,
            save_trajectories,
            checkpoints: Vec::new(),
            datasets: Vec::new(),
            trajectories: Vec::new(),
            iteration_started: Instant::now(),
            per_iteration_secs: Vec::new(),
        })
    }

    fn record(&mut self, r: &MetricRecord<'_>) -> Result<()> {
        let line = serde_json::to_string(r).expect("metric serialization is infallible");
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn finish(&mut self) -> Result<()> {
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))
    }
}

impl RunObserver for ArtifactWriter {
    fn on_trajectories(&mut self, iteration: u32, trajectories: &[TrajectoryRecord], dataset: &StateDataset) -> Result<()> {
        let rel = format!("datasets/iter{iteration:02}.dstate.jsonl");
        dataset.persist(&self.out.join(&rel))?;
        self.datasets.push(rel);
        if self.save_trajectories {
            let rel = format!("trajectories/iter{iteration:02}.jsonl");
            save_trajectories(trajectories, iteration, &self.out.join(&rel))?;
            self.trajectories.push(rel);
        }
        Ok(())
    }

    fn on_update(&mut self, update: &UpdateRecord) -> Result<()> {
        self.record(&MetricRecord::Update(update))
    }

    fn on_iteration(&mut self, report: &IterationReport, policy: &PolicyParams) -> Result<()> {
        self.record(&MetricRecord::Iteration(report))?;
        let rel = format!("checkpoints/iter{:02}.json", report.iteration);
        policy.save(&self.out.join(&rel))?;
        self.checkpoints.push(rel);
        self.per_iteration_secs.push(self.iteration_started.elapsed().as_secs_f64());
        self.iteration_started = Instant::now();
        Ok(())
    }
}

fn summary_table(reports: &[IterationReport]) -> String {
    let mut s = String::from(
        "iteration\ttrajectories\tfinished\tsuccesses\tdeployable_steps\tdeployable_finished\tdeployable_successful\tgroups\tupdates\tmean_step_reward\teval_success_rate\n",
    );
    for r in reports {
        let reward = r.mean_step_reward.map_or(String::new(), |m| format!("{m:.6}"));
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            r.iteration,
            r.trajectories,
            r.finished,
            r.successes,
            r.deployable_steps,
            r.deployable_finished,
            r.deployable_successful,
            r.groups,
            r.updates,
            reward,
            r.eval_success_rate
        );
    }
    s
}

pub fn cmd_train(opts: &TrainOptions) -> Result<RunManifest> {
    let started = Instant::now();
    let mut table = match &opts.config {
        Some(path) => parse_table(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => toml::Table::new(),
    };
    let mut overrides = opts.overrides.clone();
    if let Some(m) = opts.method {
        overrides.push(format!("method={m}"));
    }
    if let Some(w) = opts.workers {
        overrides.push(format!("workers={w}"));
    }
    for o in &overrides {
        let (k, v) = parse_override(o)?;
        table.insert(k, v);
    }
    let cfg = config_from_table(&table)?;

    create_dir(&opts.out)?;
    let train_digest = cfg.train_suite()?.digest();
    let eval_digest = cfg.eval_suite()?.digest();
    let mut writer = ArtifactWriter::new(&opts.out, opts.save_trajectories)?;
    let result = run_experiment_with(&cfg, &mut writer)?;

    let final_success_rate = result.reports.last().map_or(result.base_success_rate, |r| r.eval_success_rate);
    let summary = RunSummary {
        method: cfg.method,
        iterations: result.reports.len(),
        base_success_rate: result.base_success_rate,
        final_success_rate,
        mean_assigned_reward: result.mean_assigned_reward(),
        policy_version: result.policy.version,
        env_steps: result.env_steps,
    };
    writer.record(&MetricRecord::Summary(&summary))?;
    writer.finish()?;
    write_file(&opts.out.join(SUMMARY_FILE), &summary_table(&result.reports))?;
    result.policy.save(&opts.out.join(FINAL_CHECKPOINT))?;

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        method: cfg.method,
        config: cfg,
        overrides,
        train_suite_digest: train_digest,
        eval_suite_digest: eval_digest,
        base_success_rate: result.base_success_rate,
        final_success_rate,
        mean_assigned_reward: summary.mean_assigned_reward,
        env_steps: result.env_steps,
        reports: result.reports,
        artifacts: RunArtifacts {
            metrics: METRICS_FILE.into(),
            summary: SUMMARY_FILE.into(),
            final_checkpoint: FINAL_CHECKPOINT.into(),
            checkpoints: std::mem::take(&mut writer.checkpoints),
            datasets: std::mem::take(&mut writer.datasets),
            trajectories: std::mem::take(&mut writer.trajectories),
        },
        wall_clock: WallClock {
            total_secs: started.elapsed().as_secs_f64(),
            per_iteration_secs: std::mem::take(&mut writer.per_iteration_secs),
        },
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization is infallible") + "\n";
    write_file(&opts.out.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

// ------------------------------------------------------------------ eval

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    /// Task-suite file; when absent the eval suite of `config` is used.
    pub suite: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub max_steps: Option<u32>,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy_version: u64,
    pub suite_digest: String,
    pub tasks: usize,
    pub max_steps: u32,
    pub success_rate: f64,
}

pub fn cmd_eval(opts: &EvalOptions) -> Result<EvalReport> {
    let policy = PolicyParams::load(&opts.checkpoint)?;
    let suite = match (&opts.suite, &opts.config) {
        (Some(path), _) => TaskSuite::load(path)?,
        (None, Some(path)) => load_config(path, &[])?.eval_suite()?,
        (None, None) => ExperimentConfig::default().eval_suite()?,
    };
    let max_steps = opts.max_steps.unwrap_or(EVAL_MAX_STEPS);
    if max_steps == 0 {
        return Err(Error::InvalidParams("max-steps must be at least 1".into()));
    }
    let env = crate::synthweb::LiveEnv::new();
    let success_rate = evaluate(&env, &policy, &suite.tasks, max_steps, &Executor::new(opts.workers));
    let report = EvalReport {
        policy_version: policy.version,
        suite_digest: suite.digest(),
        tasks: suite.tasks.len(),
        max_steps,
        success_rate,
    };
    if let Some(out) = &opts.out {
        write_file(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    }
    Ok(report)
}

// --------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOutput {
    pub labels: Vec<String>,
    pub success: String,
    pub deployable: String,
    pub reward_ma: String,
}

/// Distinct column labels: the method name, suffixed when repeated.
fn run_labels(manifests: &[RunManifest]) -> Vec<String> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    manifests
        .iter()
        .map(|m| {
            let n = seen.entry(m.method.as_str()).or_insert(0);
            *n += 1;
            if *n == 1 {
                m.method.to_string()
            } else {
                format!("{}_{}", m.method, n)
            }
        })
        .collect()
}

/// Joins runs into per-iteration tables. Rows run over the longest run;
/// missing cells are empty.
pub fn compare_tables(manifests: &[RunManifest]) -> Result<(Vec<String>, String, String, String)> {
    if manifests.len() < 2 {
        return Err(Error::InvalidParams("compare needs at least two manifests".into()));
    }
    let first = &manifests[0];
    for m in &manifests[1..] {
        if m.eval_suite_digest != first.eval_suite_digest {
            return Err(Error::SuiteMismatch(format!(
                "eval suite {} (eval_seed {}) differs from {} (eval_seed {})",
                m.eval_suite_digest, m.config.eval_seed, first.eval_suite_digest, first.config.eval_seed
            )));
        }
    }
    let labels = run_labels(manifests);
    let rows = manifests.iter().map(|m| m.reports.len()).max().unwrap_or(0);

    let mut success = String::from("iteration");
    let mut deployable = String::from("iteration");
    for l in &labels {
        let _ = write!(success, "\t{l}");
        let _ = write!(deployable, "\t{l}\t{l}_finished\t{l}_successful");
    }
    success.push('\n');
    deployable.push('\n');
    let _ = write!(success, "0");
    for m in manifests {
        let _ = write!(success, "\t{:.6}", m.base_success_rate);
    }
    success.push('\n');
    for i in 0..rows {
        let _ = write!(success, "{}", i + 1);
        let _ = write!(deployable, "{}", i + 1);
        for m in manifests {
            match m.reports.get(i) {
                Some(r) => {
                    let _ = write!(success, "\t{:.6}", r.eval_success_rate);
                    let _ = write!(
                        deployable,
                        "\t{}\t{}\t{}",
                        r.deployable_steps, r.deployable_finished, r.deployable_successful
                    );
                }
                None => {
                    success.push('\t');
                    deployable.push_str("\t\t\t");
                }
            }
        }
        success.push('\n');
        deployable.push('\n');
    }

    let mut reward_ma = String::from("run\titeration\tgroup\tmoving_average\n");
    for (l, m) in labels.iter().zip(manifests) {
        let mut k = 0usize;
        for r in &m.reports {
            for v in &r.reward_moving_average {
                let _ = writeln!(reward_ma, "{l}\t{}\t{k}\t{v:.6}", r.iteration);
                k += 1;
            }
        }
    }
    Ok((labels, success, deployable, reward_ma))
}

pub fn cmd_compare(manifest_paths: &[PathBuf], out: &Path) -> Result<CompareOutput> {
    let manifests = manifest_paths.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>>>()?;
    let (labels, success, deployable, reward_ma) = compare_tables(&manifests)?;
    create_dir(out)?;
    let files = [("success.tsv", &success), ("deployable.tsv", &deployable), ("reward_ma.tsv", &reward_ma)];
    for (name, text) in files {
        write_file(&out.join(name), text)?;
    }
    Ok(CompareOutput {
        labels,
        success: "success.tsv".into(),
        deployable: "deployable.tsv".into(),
        reward_ma: "reward_ma.tsv".into(),
    })
}
