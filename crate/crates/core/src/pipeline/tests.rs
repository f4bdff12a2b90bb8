use super::*;
use crate::synthweb::{transition, EnvState};
use crate::trajectory::HistoryStep;

fn small_cfg(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        iterations: 2,
        tasks_per_iteration: 24,
        train_pool_size: 12,
        eval_tasks: 12,
        n_pages: 8,
        workers: 1,
        ..Default::default()
    }
}

struct Fixture {
    cfg: ExperimentConfig,
    pool: TaskPool,
    exec: Executor,
    env: LiveEnv,
    trajectories: Vec<TrajectoryRecord>,
}

fn fixture(method: Method) -> Fixture {
    let cfg = small_cfg(method);
    let exec = Executor::sequential();
    let pool = TaskPool::new(cfg.train_suite().unwrap().tasks, &exec);
    let env = LiveEnv::new();
    let tasks: Vec<&Task> = pool.tasks.iter().collect();
    let trajectories = collect_stage1(&env, &PolicyParams::zeros(FEATURE_DIM), &tasks, &cfg, 1, &exec);
    Fixture {
        cfg,
        pool,
        exec,
        env,
        trajectories,
    }
}

impl Fixture {
    fn inputs(&self) -> Stage2Inputs<'_> {
        Stage2Inputs {
            cfg: &self.cfg,
            pool: &self.pool,
            exec: &self.exec,
            iteration: 1,
        }
    }
}

/// Plays the golden actions of `task` and returns the trajectory.
fn golden_replay(env: &LiveEnv, task: &Task) -> TrajectoryRecord {
    let (mut state, obs) = env.reset(task, EVAL_MAX_STEPS);
    let mut ctx = StateContext::new(&task.instruction, Vec::new(), obs);
    let mut steps = Vec::new();
    for g in &task.golden {
        assert_eq!(g.fingerprint, ctx.fingerprint);
        let thought = thought_for(&g.action);
        let (next, obs, _) = env.step(task, &state, &g.action).unwrap();
        steps.push(TrajectoryStep {
            context: ctx.clone(),
            output: StructuredOutput {
                think: thought.clone(),
                answer: g.action.clone(),
            },
            next_observation: obs.clone(),
        });
        ctx = ctx.advance(thought, g.action.clone(), obs);
        state = next;
    }
    TrajectoryRecord {
        trajectory_id: "golden".into(),
        task_id: task.task_id.clone(),
        steps,
        finished: state.terminal,
        success: state.goal_reached(task),
        rollout_temperature: 0.0,
        policy_version: 0,
    }
}

#[test]
fn stage1_one_record_per_task_within_cap() {
    let cfg = ExperimentConfig {
        train_pool_size: 16,
        n_pages: 8,
        workers: 1,
        ..Default::default()
    };
    let exec = Executor::sequential();
    let pool = TaskPool::new(cfg.train_suite().unwrap().tasks, &exec);
    let tasks: Vec<&Task> = (0..256).map(|i| &pool.tasks[i % pool.len()]).collect();
    let env = LiveEnv::new();
    let theta = PolicyParams {
        weights: vec![0.0; FEATURE_DIM],
        version: 7,
    };
    let a = collect_stage1(&env, &theta, &tasks, &cfg, 3, &exec);
    assert_eq!(a.len(), 256);
    for r in &a {
        assert!(r.steps.len() <= 20);
        assert_eq!(r.policy_version, 7);
        assert_eq!(r.rollout_temperature, 1.0);
    }
    let executed: usize = a.iter().map(|r| r.steps.len()).sum();
    assert_eq!(env.steps_executed(), executed as u64);
    let b = collect_stage1(&LiveEnv::new(), &theta, &tasks, &cfg, 3, &Executor::new(4));
    assert_eq!(a, b);
}

#[test]
fn pro_cua_counts_one_group_per_state() {
    let fx = fixture(Method::ProCua);
    let mut dstate = StateDataset::from_trajectories(&fx.trajectories, FilterKind::Finished, 1);
    assert!(dstate.len() >= 10, "fixture too small: {}", dstate.len());
    dstate.entries.truncate(10);
    let grader = fx.cfg.build_grader().unwrap();
    let before = fx.env.steps_executed();
    let theta = PolicyParams::zeros(FEATURE_DIM);
    let out = stage2_pro_cua(&fx.inputs(), &theta, &dstate, &grader).unwrap();
    assert_eq!(fx.env.steps_executed(), before);
    assert_eq!(out.groups.len(), 10);
    assert_eq!(out.groups.iter().map(|g| g.rewards.len()).sum::<usize>(), 80);
    assert_eq!(out.updates.len(), 10);
    assert_eq!(out.policy.version, theta.version + 10);
    for g in &out.groups {
        assert!(g.rewards.iter().all(|&r| r == 0.0 || r == 1.0));
        if g.rewards.iter().all(|&r| r == 0.0) {
            assert!(g.advantages.iter().all(|&a| a == 0.0));
        }
    }
}

#[test]
fn rule_rewards_take_three_values() {
    let fx = fixture(Method::RuleStepRl);
    let dsucc = StateDataset::from_trajectories(&fx.trajectories, FilterKind::Successful, 1);
    let theta = PolicyParams::zeros(FEATURE_DIM);
    let out = stage2_rule(&fx.inputs(), &theta, &dsucc).unwrap();
    assert_eq!(out.groups.len(), dsucc.len());
    for (g, e) in out.groups.iter().zip(&dsucc.entries) {
        let golden = &e.golden.as_ref().unwrap().action;
        for (s, &r) in g.samples.iter().zip(&g.rewards) {
            assert!(r == 0.0 || r == 0.1 || r == 1.0, "reward {r}");
            if s.action == *golden {
                assert_eq!(r, 1.0);
            }
        }
    }
}

#[test]
fn empty_datasets_leave_policy_unchanged() {
    let fx = fixture(Method::Fbc);
    let theta = PolicyParams {
        weights: (0..FEATURE_DIM).map(|i| i as f64 * 0.1).collect(),
        version: 3,
    };
    let empty = StateDataset::new(1, FilterKind::Successful);
    let fbc = stage2_fbc(&fx.inputs(), &theta, &empty).unwrap();
    assert_eq!(fbc.policy, theta);
    assert!(fbc.updates.is_empty());
    let rule = stage2_rule(&fx.inputs(), &theta, &empty).unwrap();
    assert_eq!(rule.policy, theta);
    assert!(rule.updates.is_empty() && rule.groups.is_empty());
}

#[test]
fn fbc_lowers_its_loss() {
    let fx = fixture(Method::Fbc);
    let mut trajectories = fx.trajectories.clone();
    trajectories.extend(fx.pool.tasks.iter().take(4).map(|t| golden_replay(&fx.env, t)));
    let dsucc = StateDataset::from_trajectories(&trajectories, FilterKind::Successful, 1);
    let examples: Vec<FbcExample> = dsucc
        .entries
        .iter()
        .map(|e| {
            let (task, _) = fx.pool.get(&e.task_id).unwrap();
            FbcExample {
                candidates: CandidateSet::new(&e.context, candidates_for(&task.vocabulary, &e.context.observation)),
                golden: e.golden.as_ref().unwrap().action.clone(),
            }
        })
        .collect();
    let theta = PolicyParams::zeros(FEATURE_DIM);
    let out = stage2_fbc(&fx.inputs(), &theta, &dsucc).unwrap();
    assert_eq!(out.updates.len(), 2 * dsucc.len());
    assert_eq!(out.skipped, 0);
    assert!(grpo::fbc_loss(&out.policy, &examples).unwrap() < grpo::fbc_loss(&theta, &examples).unwrap());
}

#[test]
fn unknown_task_entries_are_skipped() {
    let fx = fixture(Method::ProCua);
    let mut dstate = StateDataset::from_trajectories(&fx.trajectories, FilterKind::Finished, 1);
    dstate.entries.truncate(3);
    dstate.entries[1].task_id = "nope".into();
    let grader = fx.cfg.build_grader().unwrap();
    let out = stage2_pro_cua(&fx.inputs(), &PolicyParams::zeros(FEATURE_DIM), &dstate, &grader).unwrap();
    assert_eq!(out.groups.len(), 2);
    assert_eq!(out.skipped, 1);
}

#[test]
fn golden_replay_solves_every_task() {
    let cfg = small_cfg(Method::ProCua);
    let env = LiveEnv::new();
    for t in cfg.eval_suite().unwrap().tasks.iter() {
        let rec = golden_replay(&env, t);
        assert!(rec.success && t.is_success(&rec), "{}", t.task_id);
    }
}

#[test]
fn evaluation_is_reproducible() {
    let cfg = small_cfg(Method::ProCua);
    let tasks = cfg.eval_suite().unwrap().tasks;
    let env = LiveEnv::new();
    let theta = PolicyParams::zeros(FEATURE_DIM);
    let a = evaluate(&env, &theta, &tasks, EVAL_MAX_STEPS, &Executor::sequential());
    let b = evaluate(&env, &theta.clone(), &tasks, EVAL_MAX_STEPS, &Executor::new(3));
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(evaluate(&env, &theta, &[], EVAL_MAX_STEPS, &Executor::sequential()), 0.0);
}

#[test]
fn reports_are_consistent() {
    for method in [Method::ProCua, Method::RuleStepRl, Method::Fbc] {
        let cfg = small_cfg(method);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.reports.len(), 2);
        let mut graded = 0;
        for (k, r) in res.reports.iter().enumerate() {
            assert_eq!(r.iteration, k as u32 + 1);
            assert_eq!(r.trajectories, cfg.tasks_per_iteration);
            assert!(r.successes <= r.finished && r.finished <= r.trajectories);
            assert!(r.deployable_successful <= r.deployable_finished);
            let expected = match method {
                Method::ProCua => r.deployable_finished,
                _ => r.deployable_successful,
            };
            assert_eq!(r.deployable_steps, expected);
            match method {
                Method::Fbc => {
                    assert_eq!(r.groups, 0);
                    assert!(r.mean_step_reward.is_none());
                    assert!(r.reward_moving_average.is_empty());
                }
                _ => {
                    assert_eq!(r.groups + r.skipped, r.deployable_steps);
                    assert_eq!(r.reward_moving_average.len(), r.groups);
                    assert_eq!(r.updates, r.groups);
                }
            }
            graded += r.groups;
        }
        assert_eq!(res.reports.last().unwrap().policy_version, res.policy.version);
        if method != Method::Fbc && graded > 0 {
            let m = res.mean_assigned_reward().unwrap();
            assert!((0.0..=1.0).contains(&m));
        }
    }
}

#[test]
fn runs_do_not_depend_on_worker_count() {
    let mut cfg = small_cfg(Method::ProCua);
    cfg.prm_noise_rate = 0.1;
    let a = run_experiment(&cfg).unwrap();
    cfg.workers = 4;
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.base_success_rate, b.base_success_rate);
    assert_eq!(a.env_steps, b.env_steps);
}

#[test]
fn single_fbc_iteration_is_deterministic() {
    let cfg = ExperimentConfig {
        iterations: 1,
        tasks_per_iteration: 4,
        ..small_cfg(Method::Fbc)
    };
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.reports.len(), 1);
    assert_eq!(a.reports, b.reports);
    assert_eq!(a.policy, b.policy);
}

#[test]
fn moving_average_uses_a_trailing_window() {
    let mut ma = MovingAverage::default();
    let mut last = 0.0;
    for i in 0..250 {
        last = ma.push(if i < 150 { 0.0 } else { 1.0 });
    }
    assert_eq!(ma.window.len(), REWARD_MA_WINDOW);
    assert_eq!(last, 1.0);
    let mut ma = MovingAverage::default();
    assert_eq!(ma.push(1.0), 1.0);
    assert_eq!(ma.push(0.0), 0.5);
}

#[test]
fn tiny_site_rewards_rise() {
    let cfg = ExperimentConfig {
        iterations: 5,
        tasks_per_iteration: 32,
        train_pool_size: 4,
        eval_tasks: 4,
        n_pages: 3,
        branching: 1,
        workers: 1,
        ..Default::default()
    };
    let res = run_experiment(&cfg).unwrap();
    let rewards: Vec<f64> = res.reports.iter().map(|r| r.mean_step_reward.unwrap()).collect();
    for w in rewards.windows(2) {
        assert!(w[1] >= w[0], "{rewards:?}");
    }
}

#[test]
fn invalid_configs_name_their_key() {
    let cases: Vec<(ExperimentConfig, &str)> = vec![
        (
            ExperimentConfig {
                iterations: 0,
                ..Default::default()
            },
            "iterations",
        ),
        (
            ExperimentConfig {
                tasks_per_iteration: 0,
                ..Default::default()
            },
            "tasks_per_iteration",
        ),
        (
            ExperimentConfig {
                max_steps: 0,
                ..Default::default()
            },
            "max_steps",
        ),
        (
            ExperimentConfig {
                clip_eps: 1.5,
                ..Default::default()
            },
            "clip_eps",
        ),
        (
            ExperimentConfig {
                group_size: 1,
                ..Default::default()
            },
            "group_size",
        ),
        (
            ExperimentConfig {
                prm_noise_rate: 0.7,
                ..Default::default()
            },
            "prm_noise_rate",
        ),
    ];
    for (cfg, key) in cases {
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains(key), "{err}");
    }
    assert!(ExperimentConfig::default().validate().is_ok());
}

#[test]
fn external_prm_needs_an_endpoint() {
    let cfg = ExperimentConfig {
        prm: PrmSource::External,
        ..Default::default()
    };
    if std::env::var(PRM_ENDPOINT_ENV).is_err() {
        assert!(cfg.build_grader().unwrap_err().to_string().contains("prm_endpoint"));
    }
    let cfg = ExperimentConfig {
        prm_endpoint: Some("http://127.0.0.1:9".into()),
        ..cfg
    };
    assert!(matches!(cfg.build_grader().unwrap(), Grader::External(_)));
}

#[test]
fn method_names_round_trip() {
    for m in [Method::ProCua, Method::RuleStepRl, Method::Fbc] {
        assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        assert_eq!(m.to_string(), m.as_str());
    }
    assert!("ppo".parse::<Method>().is_err());
    assert_eq!(Method::ProCua.filter(), FilterKind::Finished);
    assert_eq!(Method::Fbc.filter(), FilterKind::Successful);
}

#[test]
fn stage2_inputs_are_replayable_offline() {
    // Every stored state can be rebuilt from its context alone, which is
    // what lets Stage 2 run without the live environment.
    let fx = fixture(Method::ProCua);
    let dstate = StateDataset::from_trajectories(&fx.trajectories, FilterKind::Finished, 1);
    for e in dstate.entries.iter().take(50) {
        let (task, _) = fx.pool.get(&e.task_id).unwrap();
        let mut state = EnvState::initial(task, DEFAULT_MAX_STEPS);
        for HistoryStep { action, .. } in &e.context.history {
            state = transition(task, &state, action);
        }
        assert_eq!(crate::synthweb::observe(task, &state), e.context.observation);
    }
}
