//! The iterative two-stage loop. Stage 1 rolls the current policy out in
//! the live environment and stores every visited state. Stage 2 never
//! touches the environment: it samples candidate groups at stored states,
//! grades them and runs clipped policy-gradient updates (or, for the
//! behavior-cloning baseline, imitates successful trajectories).

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{serialize_output, thought_for, StructuredOutput};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::grpo::{self, AdvantageMode, CandidateGroup, FbcExample, GRPOConfig};
use crate::policy::{self, CandidateSet, PolicyParams, FEATURE_DIM};
use crate::rewards::{rule_reward, ExternalPrm, Grader, PRMOracleConfig, Strictness, DEFAULT_W_FMT, PRM_ENDPOINT_ENV};
use crate::seeding::{derive_seed, rng_for};
use crate::synthweb::{
    candidates_for, LiveEnv, Planner, SiteParams, Task, TaskSuite, DEFAULT_MAX_STEPS, EVAL_MAX_STEPS,
};
use crate::trajectory::{FilterKind, StateContext, StateDataset, TrajectoryRecord, TrajectoryStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ProCua,
    RuleStepRl,
    Fbc,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::ProCua => "pro_cua",
            Method::RuleStepRl => "rule_step_rl",
            Method::Fbc => "fbc",
        }
    }

    /// Trajectory filter feeding this method's Stage 2.
    pub fn filter(self) -> FilterKind {
        match self {
            Method::ProCua => FilterKind::Finished,
            Method::RuleStepRl | Method::Fbc => FilterKind::Successful,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pro_cua" => Ok(Method::ProCua),
            "rule_step_rl" => Ok(Method::RuleStepRl),
            "fbc" => Ok(Method::Fbc),
            other => Err(format!("unknown method `{other}` (expected pro_cua, rule_step_rl or fbc)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrmSource {
    Oracle,
    External,
}

/// Flat experiment configuration. Every key maps one-to-one onto the
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub iterations: u32,
    pub tasks_per_iteration: usize,
    pub max_steps: u32,
    pub eval_max_steps: u32,
    pub rollout_temperature: f64,
    pub w_fmt: f64,

    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub advantage_mode: AdvantageMode,
    pub groups_per_update: usize,

    pub fbc_epochs: u32,
    pub fbc_learning_rate: f64,
    pub fbc_batch_size: usize,

    pub prm: PrmSource,
    pub prm_strictness: Strictness,
    pub prm_noise_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prm_endpoint: Option<String>,
    pub prm_timeout_secs: f64,

    pub task_seed: u64,
    pub rollout_seed: u64,
    pub optimizer_seed: u64,
    pub eval_seed: u64,

    pub train_pool_size: usize,
    pub eval_tasks: usize,
    pub n_pages: usize,
    pub branching: usize,
    pub stuck_rate: f64,

    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let g = GRPOConfig::default();
        ExperimentConfig {
            method: Method::ProCua,
            iterations: 10,
            tasks_per_iteration: 256,
            max_steps: DEFAULT_MAX_STEPS,
            eval_max_steps: EVAL_MAX_STEPS,
            rollout_temperature: 1.0,
            w_fmt: DEFAULT_W_FMT,
            group_size: g.group_size,
            clip_eps: g.clip_eps,
            kl_beta: g.kl_beta,
            learning_rate: g.learning_rate,
            advantage_mode: g.advantage_mode,
            groups_per_update: g.groups_per_update,
            fbc_epochs: 2,
            fbc_learning_rate: 0.5,
            fbc_batch_size: 1,
            prm: PrmSource::Oracle,
            prm_strictness: Strictness::Lenient,
            prm_noise_rate: 0.0,
            prm_endpoint: None,
            prm_timeout_secs: 60.0,
            task_seed: 1,
            rollout_seed: 2,
            optimizer_seed: 3,
            eval_seed: 1001,
            train_pool_size: 64,
            eval_tasks: 64,
            n_pages: 20,
            branching: 3,
            stuck_rate: crate::synthweb::DEFAULT_STUCK_RATE,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn grpo(&self) -> GRPOConfig {
        GRPOConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            learning_rate: self.learning_rate,
            advantage_mode: self.advantage_mode,
            groups_per_update: self.groups_per_update,
        }
    }

    pub fn oracle(&self) -> PRMOracleConfig {
        PRMOracleConfig {
            strictness: self.prm_strictness,
            noise_rate: self.prm_noise_rate,
            seed: derive_seed(self.optimizer_seed, &[0x9e3]),
        }
    }

    pub fn site_params(&self) -> SiteParams {
        SiteParams {
            n_pages: self.n_pages,
            branching: self.branching,
            stuck_rate: self.stuck_rate,
        }
    }

    /// Checks value ranges, naming the offending key.
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, ok: bool| if ok { Ok(()) } else { Err(Error::config(key, "must be positive")) };
        positive("iterations", self.iterations >= 1)?;
        positive("tasks_per_iteration", self.tasks_per_iteration >= 1)?;
        positive("max_steps", self.max_steps >= 1)?;
        positive("eval_max_steps", self.eval_max_steps >= 1)?;
        positive("rollout_temperature", self.rollout_temperature > 0.0 && self.rollout_temperature.is_finite())?;
        positive("train_pool_size", self.train_pool_size >= 1)?;
        positive("eval_tasks", self.eval_tasks >= 1)?;
        positive("fbc_learning_rate", self.fbc_learning_rate > 0.0)?;
        positive("fbc_batch_size", self.fbc_batch_size >= 1)?;
        positive("prm_timeout_secs", self.prm_timeout_secs > 0.0)?;
        if !(0.0..=1.0).contains(&self.w_fmt) {
            return Err(Error::config("w_fmt", "must lie in [0, 1]"));
        }
        match self.grpo().validate() {
            Ok(()) => {}
            Err(grpo::GrpoError::InvalidConfig { key, reason }) => return Err(Error::config(key, reason)),
            Err(e) => return Err(Error::config("group_size", e.to_string())),
        }
        self.oracle().validate().map_err(|m| Error::config("prm_noise_rate", m))?;
        Ok(())
    }

    pub fn build_grader(&self) -> Result<Grader> {
        match self.prm {
            PrmSource::Oracle => Ok(Grader::Oracle(self.oracle())),
            PrmSource::External => {
                let endpoint = std::env::var(PRM_ENDPOINT_ENV)
                    .ok()
                    .or_else(|| self.prm_endpoint.clone())
                    .ok_or_else(|| Error::config("prm_endpoint", format!("required for an external PRM (or set {PRM_ENDPOINT_ENV})")))?;
                Ok(Grader::External(ExternalPrm::new(
                    endpoint,
                    Duration::from_secs_f64(self.prm_timeout_secs),
                )))
            }
        }
    }

    pub fn train_suite(&self) -> Result<TaskSuite> {
        Ok(TaskSuite::generate(self.task_seed, self.train_pool_size, self.site_params(), "train")?)
    }

    pub fn eval_suite(&self) -> Result<TaskSuite> {
        Ok(TaskSuite::generate(self.eval_seed, self.eval_tasks, self.site_params(), "eval")?)
    }
}

/// Tasks addressable by id, each with its distance planner.
#[derive(Debug)]
pub struct TaskPool {
    pub tasks: Vec<Task>,
    planners: Vec<Planner>,
    index: HashMap<String, usize>,
}

impl TaskPool {
    pub fn new(tasks: Vec<Task>, exec: &Executor) -> Self {
        let planners = exec.map(&tasks, |_, t| Planner::new(t));
        let index = tasks.iter().enumerate().map(|(i, t)| (t.task_id.clone(), i)).collect();
        TaskPool { tasks, planners, index }
    }

    pub fn get(&self, task_id: &str) -> Option<(&Task, &Planner)> {
        self.index.get(task_id).map(|&i| (&self.tasks[i], &self.planners[i]))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Rolls `task` out once with `theta`, sampling at `temperature` (or
/// greedily when `None`).
pub fn rollout(
    env: &LiveEnv,
    task: &Task,
    theta: &PolicyParams,
    temperature: Option<f64>,
    max_steps: u32,
    trajectory_id: String,
    rng: &mut impl Rng,
) -> Result<TrajectoryRecord> {
    let (mut state, obs) = env.reset(task, max_steps);
    let mut ctx = StateContext::new(&task.instruction, Vec::new(), obs);
    let mut steps = Vec::new();
    loop {
        let set = CandidateSet::new(&ctx, candidates_for(&task.vocabulary, &ctx.observation));
        let index = match temperature {
            Some(t) => policy::sample_group(theta, &set, t, 1, rng)?[0].index,
            None => policy::greedy_index(theta, &set)?,
        };
        let action = set.actions[index].clone();
        let thought = thought_for(&action);
        let (next, obs, done) = env.step(task, &state, &action)?;
        steps.push(TrajectoryStep {
            context: ctx.clone(),
            output: StructuredOutput {
                think: thought.clone(),
                answer: action.clone(),
            },
            next_observation: obs.clone(),
        });
        ctx = ctx.advance(thought, action, obs);
        state = next;
        if done {
            break;
        }
    }
    let finished = state.terminal;
    let mut record = TrajectoryRecord {
        trajectory_id,
        task_id: task.task_id.clone(),
        steps,
        finished,
        success: false,
        rollout_temperature: temperature.unwrap_or(0.0),
        policy_version: theta.version,
    };
    record.success = task.is_success(&record);
    Ok(record)
}

/// Stage 1: one on-policy rollout per listed task, in list order. The
/// policy is read-only here. A failed rollout is logged and dropped.
pub fn collect_stage1(
    env: &LiveEnv,
    theta: &PolicyParams,
    tasks: &[&Task],
    cfg: &ExperimentConfig,
    iteration: u32,
    exec: &Executor,
) -> Vec<TrajectoryRecord> {
    exec.map(tasks, |i, task| {
        let mut rng = rng_for(cfg.rollout_seed, &[u64::from(iteration), i as u64]);
        let id = format!("it{iteration:02}-{i:04}");
        rollout(env, task, theta, Some(cfg.rollout_temperature), cfg.max_steps, id, &mut rng)
            .map_err(|e| log::warn!("rollout of {} aborted: {e}", task.task_id))
            .ok()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// One optimizer update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub iteration: u32,
    pub update: usize,
    pub loss: f64,
    pub mean_reward: f64,
    pub kl: f64,
}

#[derive(Debug, Clone)]
pub struct Stage2Outcome {
    pub policy: PolicyParams,
    pub groups: Vec<CandidateGroup>,
    pub updates: Vec<UpdateRecord>,
    /// Entries that could not be used (unknown task, off-support golden).
    pub skipped: usize,
}

/// Shared read-only inputs of Stage 2.
pub struct Stage2Inputs<'a> {
    pub cfg: &'a ExperimentConfig,
    pub pool: &'a TaskPool,
    pub exec: &'a Executor,
    pub iteration: u32,
}

fn group_for<F>(inputs: &Stage2Inputs<'_>, theta: &PolicyParams, dataset: &StateDataset, score: F) -> (Vec<CandidateGroup>, usize)
where
    F: Fn(&Task, &Planner, usize, &StateContext, &policy::CandidateSample) -> f64 + Sync + Send,
{
    let cfg = inputs.cfg;
    let built = inputs.exec.map(&dataset.entries, |i, entry| {
        let Some((task, planner)) = inputs.pool.get(&entry.task_id) else {
            log::warn!("state {} refers to unknown task {}", entry.context.fingerprint, entry.task_id);
            return None;
        };
        let ctx = &entry.context;
        let set = CandidateSet::new(ctx, candidates_for(&task.vocabulary, &ctx.observation));
        let mut rng = rng_for(cfg.optimizer_seed, &[u64::from(inputs.iteration), i as u64]);
        let samples = policy::sample_group(theta, &set, cfg.rollout_temperature, cfg.group_size, &mut rng).ok()?;
        let rewards = samples.iter().map(|s| score(task, planner, i, ctx, s)).collect();
        CandidateGroup::new(ctx.clone(), set, samples, rewards, cfg.advantage_mode).ok()
    });
    let skipped = built.iter().filter(|g| g.is_none()).count();
    (built.into_iter().flatten().collect(), skipped)
}

/// One epoch of clipped policy-gradient updates over `groups` in a seeded
/// order. All groups were sampled by `theta`, which therefore serves both
/// as the sampling policy and as the KL reference.
fn optimize_groups(inputs: &Stage2Inputs<'_>, theta: &PolicyParams, groups: &[CandidateGroup]) -> Result<(PolicyParams, Vec<UpdateRecord>)> {
    let cfg = inputs.cfg.grpo();
    let old = theta.clone();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut rng_for(inputs.cfg.optimizer_seed, &[u64::from(inputs.iteration), u64::MAX]));
    let mut current = theta.clone();
    let mut updates = Vec::new();
    for (u, chunk) in order.chunks(cfg.groups_per_update).enumerate() {
        let batch: Vec<CandidateGroup> = chunk.iter().map(|&i| groups[i].clone()).collect();
        let loss = grpo::grpo_batch_loss(&current, &old, &old, &batch, &cfg)?;
        let mut kl = 0.0;
        for g in &batch {
            kl += policy::kl(&current, &old, &g.candidates)?;
        }
        let grad = grpo::grpo_grad(&current, &old, &old, &batch, &cfg)?;
        current = grpo::sgd_step(&current, &grad, cfg.learning_rate);
        updates.push(UpdateRecord {
            iteration: inputs.iteration,
            update: u,
            loss,
            mean_reward: batch.iter().map(CandidateGroup::mean_reward).sum::<f64>() / batch.len() as f64,
            kl: kl / batch.len() as f64,
        });
    }
    Ok((current, updates))
}

/// Stage 2 with process-reward grading of every sampled candidate.
pub fn stage2_pro_cua(inputs: &Stage2Inputs<'_>, theta: &PolicyParams, dstate: &StateDataset, grader: &Grader) -> Result<Stage2Outcome> {
    let (groups, skipped) = group_for(inputs, theta, dstate, |task, planner, _, ctx, s| {
        grader.reward(task, planner, ctx, &s.thought, &s.action)
    });
    let (policy, updates) = optimize_groups(inputs, theta, &groups)?;
    Ok(Stage2Outcome {
        policy,
        groups,
        updates,
        skipped,
    })
}

/// Stage 2 with rule-based rewards against the executed actions of
/// successful trajectories. Candidates are serialized to raw text first so
/// the format check runs.
pub fn stage2_rule(inputs: &Stage2Inputs<'_>, theta: &PolicyParams, dsucc: &StateDataset) -> Result<Stage2Outcome> {
    if dsucc.is_empty() {
        log::warn!("iteration {}: no successful trajectories, skipping updates", inputs.iteration);
    }
    let w_fmt = inputs.cfg.w_fmt;
    let (groups, skipped) = group_for(inputs, theta, dsucc, |_, _, i, _, s| {
        let Some(golden) = &dsucc.entries[i].golden else {
            return 0.0;
        };
        let raw = serialize_output(&StructuredOutput {
            think: s.thought.clone(),
            answer: s.action.clone(),
        });
        rule_reward(&raw, &golden.action, golden.bbox.as_ref(), w_fmt).total
    });
    let (policy, updates) = optimize_groups(inputs, theta, &groups)?;
    Ok(Stage2Outcome {
        policy,
        groups,
        updates,
        skipped,
    })
}

/// Behavior cloning on successful trajectories: `fbc_epochs` passes of
/// minibatch gradient descent on the negative log-likelihood.
pub fn stage2_fbc(inputs: &Stage2Inputs<'_>, theta: &PolicyParams, dsucc: &StateDataset) -> Result<Stage2Outcome> {
    let cfg = inputs.cfg;
    let mut skipped = 0;
    let mut examples = Vec::new();
    for e in &dsucc.entries {
        match (inputs.pool.get(&e.task_id), &e.golden) {
            (Some((task, _)), Some(golden)) => examples.push(FbcExample {
                candidates: CandidateSet::new(&e.context, candidates_for(&task.vocabulary, &e.context.observation)),
                golden: golden.action.clone(),
            }),
            _ => skipped += 1,
        }
    }
    let mut current = theta.clone();
    let mut updates = Vec::new();
    let mut rng = rng_for(cfg.optimizer_seed, &[u64::from(inputs.iteration), u64::MAX - 1]);
    for _ in 0..cfg.fbc_epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.fbc_batch_size) {
            let batch: Vec<FbcExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let eval = grpo::fbc_eval(&current, &batch)?;
            skipped += eval.skipped;
            if eval.used == 0 {
                continue;
            }
            current = grpo::sgd_step(&current, &eval.grad, cfg.fbc_learning_rate);
            updates.push(UpdateRecord {
                iteration: inputs.iteration,
                update: updates.len(),
                loss: eval.loss,
                mean_reward: 0.0,
                kl: 0.0,
            });
        }
    }
    Ok(Stage2Outcome {
        policy: current,
        groups: Vec::new(),
        updates,
        skipped,
    })
}

/// Greedy success rate on `tasks` with the evaluation horizon.
pub fn evaluate(env: &LiveEnv, theta: &PolicyParams, tasks: &[Task], max_steps: u32, exec: &Executor) -> f64 {
    if tasks.is_empty() {
        return 0.0;
    }
    let wins = exec.map(tasks, |i, task| {
        // Greedy decoding draws no randomness; the generator is unused.
        let mut rng = rng_for(0, &[i as u64]);
        rollout(env, task, theta, None, max_steps, format!("eval-{i:04}"), &mut rng)
            .map(|r| r.success)
            .unwrap_or(false)
    });
    wins.iter().filter(|w| **w).count() as f64 / tasks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub policy_version: u64,
    pub trajectories: usize,
    pub finished: usize,
    pub successes: usize,
    /// Step-level training examples under this run's method filter.
    pub deployable_steps: usize,
    /// Steps from finished trajectories of this same rollout.
    pub deployable_finished: usize,
    /// Steps from successful trajectories of this same rollout.
    pub deployable_successful: usize,
    pub groups: usize,
    pub updates: usize,
    pub skipped: usize,
    pub mean_step_reward: Option<f64>,
    /// Trailing moving average of group mean rewards, one point per group.
    pub reward_moving_average: Vec<f64>,
    pub eval_success_rate: f64,
}

/// Moving average window, in graded groups.
pub const REWARD_MA_WINDOW: usize = 100;

#[derive(Debug, Default)]
struct MovingAverage {
    window: VecDeque<f64>,
}

impl MovingAverage {
    fn push(&mut self, x: f64) -> f64 {
        self.window.push_back(x);
        if self.window.len() > REWARD_MA_WINDOW {
            self.window.pop_front();
        }
        self.window.iter().sum::<f64>() / self.window.len() as f64
    }
}

/// Receives run artifacts as they are produced.
pub trait RunObserver {
    fn on_trajectories(&mut self, _iteration: u32, _trajectories: &[TrajectoryRecord], _dataset: &StateDataset) -> Result<()> {
        Ok(())
    }
    fn on_update(&mut self, _update: &UpdateRecord) -> Result<()> {
        Ok(())
    }
    fn on_iteration(&mut self, _report: &IterationReport, _policy: &PolicyParams) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;
impl RunObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub base_success_rate: f64,
    pub reports: Vec<IterationReport>,
    pub policy: PolicyParams,
    /// Live environment steps taken during Stage 1 and evaluation.
    pub env_steps: u64,
}

impl ExperimentResult {
    /// Mean of every step reward assigned during the run, over all groups
    /// of all iterations. `None` when nothing was graded.
    pub fn mean_assigned_reward(&self) -> Option<f64> {
        let (mut total, mut groups) = (0.0, 0usize);
        for r in &self.reports {
            if let Some(m) = r.mean_step_reward {
                total += m * r.groups as f64;
                groups += r.groups;
            }
        }
        (groups > 0).then(|| total / groups as f64)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    run_experiment_with(cfg, &mut NoopObserver)
}

pub fn run_experiment_with(cfg: &ExperimentConfig, observer: &mut dyn RunObserver) -> Result<ExperimentResult> {
    cfg.validate()?;
    let exec = Executor::new(cfg.workers);
    let train = cfg.train_suite()?;
    let eval = cfg.eval_suite()?;
    let pool = TaskPool::new(train.tasks, &exec);
    let grader = cfg.build_grader()?;
    let env = LiveEnv::new();

    let mut theta = PolicyParams::zeros(FEATURE_DIM);
    let base_success_rate = evaluate(&env, &theta, &eval.tasks, cfg.eval_max_steps, &exec);
    log::info!("base policy eval success {base_success_rate:.3}");

    let mut ma = MovingAverage::default();
    let mut reports = Vec::new();
    for iteration in 1..=cfg.iterations {
        let mut pick = rng_for(cfg.task_seed, &[0x7a5c, u64::from(iteration)]);
        let tasks: Vec<&Task> = (0..cfg.tasks_per_iteration)
            .map(|_| &pool.tasks[pick.gen_range(0..pool.len())])
            .collect();

        let trajectories = collect_stage1(&env, &theta, &tasks, cfg, iteration, &exec);
        let dfinished = StateDataset::from_trajectories(&trajectories, FilterKind::Finished, iteration);
        let dsucc = StateDataset::from_trajectories(&trajectories, FilterKind::Successful, iteration);
        let dataset = match cfg.method.filter() {
            FilterKind::Finished => &dfinished,
            _ => &dsucc,
        };
        observer.on_trajectories(iteration, &trajectories, dataset)?;

        let env_before = env.steps_executed();
        let inputs = Stage2Inputs {
            cfg,
            pool: &pool,
            exec: &exec,
            iteration,
        };
        let outcome = match cfg.method {
            Method::ProCua => stage2_pro_cua(&inputs, &theta, dataset, &grader)?,
            Method::RuleStepRl => stage2_rule(&inputs, &theta, dataset)?,
            Method::Fbc => stage2_fbc(&inputs, &theta, dataset)?,
        };
        assert_eq!(env.steps_executed(), env_before, "stage 2 must not step the environment");
        for u in &outcome.updates {
            observer.on_update(u)?;
        }
        theta = outcome.policy;

        let series: Vec<f64> = outcome.groups.iter().map(|g| ma.push(g.mean_reward())).collect();
        let mean_step_reward = (!outcome.groups.is_empty()).then(|| {
            let total: f64 = outcome.groups.iter().flat_map(|g| g.rewards.iter()).sum();
            total / (outcome.groups.len() * cfg.group_size) as f64
        });
        let eval_success_rate = evaluate(&env, &theta, &eval.tasks, cfg.eval_max_steps, &exec);
        let report = IterationReport {
            iteration,
            policy_version: theta.version,
            trajectories: trajectories.len(),
            finished: trajectories.iter().filter(|t| t.finished).count(),
            successes: trajectories.iter().filter(|t| t.success).count(),
            deployable_steps: dataset.len(),
            deployable_finished: dfinished.len(),
            deployable_successful: dsucc.len(),
            groups: outcome.groups.len(),
            updates: outcome.updates.len(),
            skipped: outcome.skipped,
            mean_step_reward,
            reward_moving_average: series,
            eval_success_rate,
        };
        log::info!(
            "iteration {iteration}: {} finished / {} successful of {}, {} deployable steps, eval {:.3}",
            report.finished,
            report.successes,
            report.trajectories,
            report.deployable_steps,
            report.eval_success_rate
        );
        observer.on_iteration(&report, &theta)?;
        reports.push(report);
    }
    Ok(ExperimentResult {
        base_success_rate,
        reports,
        policy: theta,
        env_steps: env.steps_executed(),
    })
}

#[cfg(test)]
mod tests;
