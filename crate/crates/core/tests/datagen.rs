use metadt_core::datagen::{
    build_demo, calibrate_medium, collect, expert_action, medium_action, mix, run_behavior, top_indices,
    BehaviorPolicy, QualityProbe, QUALITY_BAND,
};
use metadt_core::rng::task_rng;
use metadt_core::{DatasetType, EnvSpec, OfflineDataset, Source, Split, TaskSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn expert_action_examples() {
    let env = EnvSpec::point_robot();
    let task = TaskSpec::goal_task(0, [1.0, 1.0], Split::Train);
    assert_eq!(expert_action(&env, [0.0, 0.0], &task), [0.1, 0.1]);
    let a = expert_action(&env, [0.95, 1.0], &task);
    assert!((a[0] - 0.05).abs() < 1e-15 && a[1] == 0.0);
    let penv = EnvSpec::point_robot_param();
    let wind = TaskSpec::wind_task(0, [0.03, 0.0], Split::Train);
    assert_eq!(expert_action(&penv, [0.5, 0.5], &wind), [-0.03, 0.0]);
}

#[test]
fn medium_action_limits_and_bounds() {
    let env = EnvSpec::point_robot();
    let task = TaskSpec::goal_task(0, [0.4, 0.7], Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = [0.33, 0.69];
    let tiny = medium_action(&env, p, &task, 1e-12, &mut rng);
    let exp = expert_action(&env, p, &task);
    assert!((tiny[0] - exp[0]).abs() < 1e-10 && (tiny[1] - exp[1]).abs() < 1e-10);
    for _ in 0..1000 {
        let p = [rng.random_range(-1.0..2.0), rng.random_range(-1.0..2.0)];
        let a = medium_action(&env, p, &task, 0.5, &mut rng);
        assert!(a.iter().all(|x| x.abs() <= 0.1));
    }
    assert!(BehaviorPolicy::medium(0.0).is_err());
    assert!(BehaviorPolicy::medium(-1.0).is_err());
}

fn random_return(env: &EnvSpec, tasks: &[TaskSpec], episodes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..episodes {
        let task = &tasks[i % tasks.len()];
        let mut s = env.reset(task);
        while !s.done {
            let a = [rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1)];
            let (next, r) = env.step(&s, task, a).unwrap();
            total += r;
            s = next;
        }
    }
    total / episodes as f64
}

#[test]
fn calibration_lands_in_band_under_independent_rollouts() {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(45, 5, 0, false).unwrap();
    let cal = calibrate_medium(&env, &train, 0).unwrap();
    assert!(cal.ratio >= QUALITY_BAND.0 && cal.ratio <= QUALITY_BAND.1, "{cal:?}");
    assert_eq!(calibrate_medium(&env, &train, 0).unwrap(), cal);

    // Fresh 200-episode Monte-Carlo estimate on a different rollout stream.
    let medium = BehaviorPolicy::medium(cal.noise_std).unwrap();
    let probe = QualityProbe::new(&env, &train, 200, 12345).unwrap();
    let med = probe.returns(&medium).unwrap();
    let n = med.len() as f64;
    let mean = med.iter().sum::<f64>() / n;
    let se = (med.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let exp = probe.expert_return();
    // Band on returns: 3 R_exp <= R_med <= 2 R_exp, widened by 2 standard errors.
    assert!(
        mean >= 3.0 * exp - 2.0 * se && mean <= 2.0 * exp + 2.0 * se,
        "mean {mean} se {se} expert {exp}"
    );
}

#[test]
fn expert_ratio_is_one_and_random_is_far_below() {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(45, 5, 0, false).unwrap();
    let probe = QualityProbe::new(&env, &train, 100, 0).unwrap();
    assert_eq!(probe.ratio(&BehaviorPolicy::Expert).unwrap(), 1.0);
    let q = probe.expert_return() / random_return(&env, &train, 200, 9);
    assert!(q < QUALITY_BAND.0 / 2.0, "random ratio {q}");
}

#[test]
fn calibration_needs_five_tasks() {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(4, 1, 0, false).unwrap();
    assert!(calibrate_medium(&env, &train, 0).is_err());
}

#[test]
fn collect_counts() {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(5, 1, 3, false).unwrap();
    let ds = collect(&env, &train, &BehaviorPolicy::Expert, 100, 3).unwrap();
    assert_eq!(ds.num_trajectories(), 500);
    assert_eq!(ds.num_transitions(), 10_000);
    assert_eq!(ds.dataset_type, DatasetType::Expert);
    assert!(ds
        .iter_trajectories()
        .all(|t| t.len() == 20 && t.source == Some(Source::Expert)));
    ds.validate(&env).unwrap();
}

#[test]
fn single_trajectory_dataset_is_valid() {
    let env = EnvSpec::point_robot_param();
    let (train, _) = env.sample_tasks(1, 1, 0, false).unwrap();
    let ds = collect(&env, &train, &BehaviorPolicy::medium(0.05).unwrap(), 1, 0).unwrap();
    assert_eq!(ds.num_trajectories(), 1);
    ds.validate(&env).unwrap();
}

#[test]
fn collected_returns_match_direct_rollouts() {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(3, 1, 5, false).unwrap();
    let policy = BehaviorPolicy::medium(0.08).unwrap();
    let ds = collect(&env, &train, &policy, 4, 5).unwrap();
    for task in &train {
        // Re-roll by hand from the task's own stream.
        let mut rng = task_rng(5, task.task_id);
        for traj in ds.task_trajectories(task.task_id).unwrap() {
            let mut s = env.reset(task);
            let mut ret = 0.0;
            while !s.done {
                let a = medium_action(&env, s.position, task, 0.08, &mut rng);
                let (next, r) = env.step(&s, task, a).unwrap();
                ret += r;
                s = next;
            }
            assert!((traj.total_return() - ret).abs() < 1e-12);
        }
    }
    assert_eq!(collect(&env, &train, &policy, 4, 5).unwrap(), ds);
    assert_ne!(collect(&env, &train, &policy, 4, 6).unwrap(), ds);
}

#[test]
fn expert_rollout_is_reproducible() {
    let env = EnvSpec::point_robot();
    let task = TaskSpec::goal_task(0, [0.9, 0.2], Split::Train);
    let mut r1 = ChaCha8Rng::seed_from_u64(0);
    let mut r2 = ChaCha8Rng::seed_from_u64(99);
    let a = run_behavior(&env, &task, &BehaviorPolicy::Expert, &mut r1).unwrap();
    let b = run_behavior(&env, &task, &BehaviorPolicy::Expert, &mut r2).unwrap();
    assert_eq!(a, b);
}

fn paired(n: usize, seed: u64) -> (EnvSpec, OfflineDataset, OfflineDataset) {
    let env = EnvSpec::point_robot();
    let (train, _) = env.sample_tasks(3, 1, seed, false).unwrap();
    let med = collect(&env, &train, &BehaviorPolicy::medium(0.1).unwrap(), n, seed).unwrap();
    let exp = collect(&env, &train, &BehaviorPolicy::Expert, n, seed).unwrap();
    (env, med, exp)
}

#[test]
fn mixed_composition_by_provenance() {
    for (n, want) in [(100, (70, 30)), (10, (7, 3))] {
        let (env, med, exp) = paired(n, 1);
        let mixed = mix(&med, &exp, &env, 1).unwrap();
        assert_eq!(mixed.dataset_type, DatasetType::Mixed);
        for trajs in &mixed.trajectories {
            let m = trajs.iter().filter(|t| t.source == Some(Source::Medium)).count();
            let e = trajs.iter().filter(|t| t.source == Some(Source::Expert)).count();
            assert_eq!((m, e), want);
        }
        mixed.validate(&env).unwrap();
        assert_eq!(mix(&med, &exp, &env, 1).unwrap(), mixed);
    }
}

#[test]
fn mix_rejects_mismatched_tasks() {
    let (env, med, _) = paired(4, 1);
    let (_, _, other) = paired(4, 2);
    assert!(mix(&med, &other, &env, 0).is_err());
}

#[test]
fn top_indices_examples() {
    assert_eq!(top_indices(&[-5.0, -9.0, -7.0], 2), vec![0, 2]);
    assert_eq!(top_indices(&[-1.0, -1.0, -2.0, -1.0], 2), vec![0, 1]);
    assert_eq!(top_indices(&[-3.0], 5), vec![0]);
}

#[test]
fn top_indices_match_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let n = rng.random_range(1..30);
        // Coarse values so ties are common.
        let returns: Vec<f64> = (0..n).map(|_| -(rng.random_range(0..8) as f64)).collect();
        let m = rng.random_range(1..=n + 2);
        let mut pairs: Vec<(f64, usize)> = returns.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let oracle: Vec<usize> = pairs.into_iter().take(m).map(|p| p.1).collect();
        assert_eq!(top_indices(&returns, m), oracle);
    }
}

#[test]
fn demo_holds_best_trajectories() {
    let (env, med, _) = paired(10, 4);
    let task_id = med.tasks[1].task_id;
    let demo = build_demo(&med, task_id, 3).unwrap();
    assert_eq!(demo.len(), 3);
    let mut all: Vec<f64> = med
        .task_trajectories(task_id)
        .unwrap()
        .iter()
        .map(|t| t.total_return())
        .collect();
    all.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let got: Vec<f64> = demo.iter().map(|t| t.total_return()).collect();
    assert_eq!(got, all[..3].to_vec());
    assert_eq!(build_demo(&med, task_id, 50).unwrap().len(), 10);
    assert!(build_demo(&med, 999, 1).is_err());
    let (_, _, exp) = paired(10, 4);
    let best = build_demo(&exp, task_id, 1).unwrap();
    let max = exp
        .task_trajectories(task_id)
        .unwrap()
        .iter()
        .map(|t| t.total_return())
        .fold(f64::MIN, f64::max);
    assert_eq!(best[0].total_return(), max);
    let _ = env;
}
