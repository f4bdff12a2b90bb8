use proptest::prelude::*;

use procua::action::{serialize_output, Action, Point, StructuredOutput};
use procua::exec::Executor;
use procua::grpo::{compute_advantages, AdvantageMode};
use procua::pipeline::{collect_stage1, ExperimentConfig, TaskPool};
use procua::policy::{distribution, greedy_index, kl, CandidateSet, FeatureVector, PolicyParams, FEATURE_DIM};
use procua::rewards::{rule_reward, word_f1};
use procua::synthweb::{LiveEnv, Rect, Task};
use procua::trajectory::{filter_finished, filter_successful, FilterKind, StateDataset};

fn set_from(features: Vec<Vec<f64>>) -> CandidateSet {
    CandidateSet {
        actions: (0..features.len()).map(|i| Action::click(format!("c{i}"), Point::new(i as f64, 1.0))).collect(),
        features: features.into_iter().map(FeatureVector).collect(),
    }
}

fn features(dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, dim), 1..8)
}

fn weights(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, dim)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn advantages_are_centered_and_scaled(rewards in prop::collection::vec(-5.0..5.0f64, 2..16)) {
        let a = compute_advantages(&rewards, AdvantageMode::MeanStd).unwrap();
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
        prop_assert!(var.abs() < 1e-12 || (var - 1.0).abs() < 1e-9);
        let c = compute_advantages(&rewards, AdvantageMode::MeanOnly).unwrap();
        prop_assert!(c.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn distribution_is_normalized(f in features(3), w in weights(3), t in 0.05..5.0f64) {
        let set = set_from(f);
        let theta = PolicyParams { weights: w, version: 0 };
        let p = distribution(&theta, &set, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|x| *x >= 0.0));
        // The greedy choice is a mode at every temperature.
        let g = greedy_index(&theta, &set).unwrap();
        let max = p.iter().cloned().fold(0.0, f64::max);
        prop_assert!((p[g] - max).abs() <= 1e-12 * max.max(1.0));
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(f in features(4), w in weights(4), v in weights(4)) {
        let set = set_from(f);
        let a = PolicyParams { weights: w, version: 0 };
        let b = PolicyParams { weights: v, version: 0 };
        prop_assert!(kl(&a, &b, &set).unwrap() >= 0.0);
        prop_assert!(kl(&a, &a, &set).unwrap().abs() < 1e-12);
    }

    #[test]
    fn word_f1_is_bounded_and_symmetric(a in "[a-c ]{0,12}", b in "[a-c ]{0,12}") {
        let x = word_f1(&a, &b);
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((x - word_f1(&b, &a)).abs() < 1e-12);
    }

    #[test]
    fn rule_reward_totals_are_three_valued(raw in any::<String>(), x in 0.0..1280.0f64, y in 0.0..720.0f64, gx in 0.0..1280.0f64, gy in 0.0..720.0f64) {
        let golden = Action::click("g", Point::new(gx, gy));
        let bbox = Rect::new(gx - 20.0, gy - 10.0, gx + 20.0, gy + 10.0);
        let r = rule_reward(&raw, &golden, Some(&bbox), 0.1).total;
        prop_assert!(r == 0.0 || r == 0.1 || r == 1.0);
        let out = serialize_output(&StructuredOutput { think: "t".into(), answer: Action::click("c", Point::new(x, y)) });
        let r = rule_reward(&out, &golden, Some(&bbox), 0.1);
        prop_assert_eq!(r.total == 1.0, bbox.contains(Point::new(x, y)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn finished_filter_contains_successful(seed in 0u64..1000, w in weights(FEATURE_DIM)) {
        let cfg = ExperimentConfig { rollout_seed: seed, train_pool_size: 8, n_pages: 8, workers: 1, ..Default::default() };
        let pool = TaskPool::new(cfg.train_suite().unwrap().tasks, &Executor::sequential());
        let tasks: Vec<&Task> = pool.tasks.iter().cycle().take(24).collect();
        let theta = PolicyParams { weights: w, version: 0 };
        let trajectories = collect_stage1(&LiveEnv::new(), &theta, &tasks, &cfg, 1, &Executor::sequential());
        let fin = filter_finished(&trajectories, 1);
        let succ = filter_successful(&trajectories, 1);
        prop_assert!(succ.len() <= fin.len());
        let keys: std::collections::HashSet<(String, usize)> =
            fin.entries.iter().map(|e| (e.trajectory_id.clone(), e.step_index)).collect();
        prop_assert!(succ.entries.iter().all(|e| keys.contains(&(e.trajectory_id.clone(), e.step_index))));
        prop_assert!(succ.entries.iter().all(|e| e.golden.is_some()));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        fin.persist(&path).unwrap();
        let back = StateDataset::load(&path).unwrap();
        prop_assert_eq!(back.filter, FilterKind::Finished);
        prop_assert_eq!(back.entries, fin.entries);
    }
}
