//! Scripted behavior policies and offline dataset synthesis.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{mixed_medium_count, DatasetType, OfflineDataset, Source, TaskSpec, Trajectory, Transition, Vec2};
use crate::env::EnvSpec;
use crate::error::{CoreError, Result};
use crate::rng::{sub_rng, task_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BehaviorPolicy {
    Expert,
    Medium { noise_std: f64 },
}

impl BehaviorPolicy {
    pub fn medium(noise_std: f64) -> Result<Self> {
        if noise_std > 0.0 && noise_std.is_finite() {
            Ok(Self::Medium { noise_std })
        } else {
            Err(CoreError::InvalidConfig(format!(
                "medium noise_std must be positive, got {noise_std}"
            )))
        }
    }

    pub fn source(&self) -> Source {
        match self {
            BehaviorPolicy::Expert => Source::Expert,
            BehaviorPolicy::Medium { .. } => Source::Medium,
        }
    }

    pub fn dataset_type(&self) -> DatasetType {
        match self {
            BehaviorPolicy::Expert => DatasetType::Expert,
            BehaviorPolicy::Medium { .. } => DatasetType::Medium,
        }
    }

    pub fn action<R: Rng>(&self, env: &EnvSpec, position: Vec2, task: &TaskSpec, rng: &mut R) -> Vec2 {
        match *self {
            BehaviorPolicy::Expert => expert_action(env, position, task),
            BehaviorPolicy::Medium { noise_std } => medium_action(env, position, task, noise_std, rng),
        }
    }
}

/// Heads straight for the goal, cancelling the wind when there is one.
pub fn expert_action(env: &EnvSpec, position: Vec2, task: &TaskSpec) -> Vec2 {
    let g = env.goal(task);
    let w = env.wind(task);
    env.clip_action([g[0] - position[0] - w[0], g[1] - position[1] - w[1]])
}

/// Expert action plus isotropic Gaussian noise, clipped to the action box.
pub fn medium_action<R: Rng>(env: &EnvSpec, position: Vec2, task: &TaskSpec, noise_std: f64, rng: &mut R) -> Vec2 {
    let e = expert_action(env, position, task);
    if noise_std <= 0.0 {
        return e;
    }
    let n = Normal::new(0.0, noise_std).expect("finite noise");
    env.clip_action([e[0] + n.sample(rng), e[1] + n.sample(rng)])
}

/// One full-horizon episode of `policy` on `task`.
pub fn run_behavior<R: Rng>(
    env: &EnvSpec,
    task: &TaskSpec,
    policy: &BehaviorPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut state = env.reset(task);
    let mut steps = Vec::with_capacity(env.horizon);
    while !state.done {
        let a = policy.action(env, state.position, task, rng);
        let (next, r) = env.step(&state, task, a)?;
        steps.push(Transition {
            s: state.position,
            a: env.clip_action(a),
            r,
            s_next: next.position,
            t: state.t,
        });
        state = next;
    }
    Trajectory::new(task.task_id, steps, Some(policy.source()))
}

/// `n_per_task` episodes per task; task `i` draws from its own stream
/// seeded with `seed · 10007 + task_id`.
pub fn collect(
    env: &EnvSpec,
    tasks: &[TaskSpec],
    policy: &BehaviorPolicy,
    n_per_task: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let trajectories = tasks
        .iter()
        .map(|task| {
            let mut rng = task_rng(seed, task.task_id);
            (0..n_per_task)
                .map(|_| run_behavior(env, task, policy, &mut rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(env, policy.dataset_type(), tasks.to_vec(), trajectories, seed)
}

/// Outcome of [`calibrate_medium`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub noise_std: f64,
    /// `expert_return / medium_return`; both are negative so this lies in (0, 1].
    pub ratio: f64,
    pub expert_return: f64,
    pub medium_return: f64,
    /// Every `(noise_std, ratio)` probed, in order.
    pub probes: Vec<(f64, f64)>,
}

pub const QUALITY_BAND: (f64, f64) = (1.0 / 3.0, 0.5);
pub const CALIBRATION_ROLLOUTS: usize = 100;
pub const CALIBRATION_ITERATIONS: usize = 20;
pub const NOISE_RANGE: (f64, f64) = (0.01, 0.5);

/// Mean returns of the expert and of noisy policies over a fixed set of
/// rollouts. Rollout `i` runs on task `i mod n` with its own noise stream,
/// so every probed noise level sees the same underlying draws.
pub struct QualityProbe<'a> {
    env: &'a EnvSpec,
    tasks: &'a [TaskSpec],
    rollouts: usize,
    seed: u64,
    expert_return: f64,
}

impl<'a> QualityProbe<'a> {
    pub fn new(env: &'a EnvSpec, tasks: &'a [TaskSpec], rollouts: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() || rollouts == 0 {
            return Err(CoreError::InvalidConfig(
                "quality probe needs tasks and rollouts".into(),
            ));
        }
        let mut probe = Self {
            env,
            tasks,
            rollouts,
            seed,
            expert_return: 0.0,
        };
        probe.expert_return = probe.mean_return(&BehaviorPolicy::Expert)?;
        Ok(probe)
    }

    pub fn expert_return(&self) -> f64 {
        self.expert_return
    }

    pub fn mean_return(&self, policy: &BehaviorPolicy) -> Result<f64> {
        Ok(self.returns(policy)?.iter().sum::<f64>() / self.rollouts as f64)
    }

    pub fn returns(&self, policy: &BehaviorPolicy) -> Result<Vec<f64>> {
        (0..self.rollouts)
            .map(|i| {
                let task = &self.tasks[i % self.tasks.len()];
                let mut rng = sub_rng(self.seed, Stream::Calibration, i as u64);
                Ok(run_behavior(self.env, task, policy, &mut rng)?.total_return())
            })
            .collect()
    }

    pub fn ratio(&self, policy: &BehaviorPolicy) -> Result<f64> {
        Ok(self.expert_return / self.mean_return(policy)?)
    }
}

/// Bisects the medium noise level so that `expert_return / medium_return`
/// lands in [`QUALITY_BAND`], aiming at the band's midpoint.
pub fn calibrate_medium(env: &EnvSpec, tasks: &[TaskSpec], seed: u64) -> Result<Calibration> {
    if tasks.len() < 5 {
        return Err(CoreError::InvalidConfig(format!(
            "calibration needs at least 5 tasks, got {}",
            tasks.len()
        )));
    }
    let probe = QualityProbe::new(env, tasks, CALIBRATION_ROLLOUTS, seed)?;
    let target = 0.5 * (QUALITY_BAND.0 + QUALITY_BAND.1);
    let in_band = |q: f64| q >= QUALITY_BAND.0 && q <= QUALITY_BAND.1;
    let (mut lo, mut hi) = NOISE_RANGE;
    let mut probes = Vec::with_capacity(CALIBRATION_ITERATIONS);
    let mut best: Option<(f64, f64)> = None;
    for _ in 0..CALIBRATION_ITERATIONS {
        let mid = 0.5 * (lo + hi);
        let q = probe.ratio(&BehaviorPolicy::medium(mid)?)?;
        probes.push((mid, q));
        let better = best.is_none_or(|(_, bq)| (in_band(q), -(q - target).abs()) > (in_band(bq), -(bq - target).abs()));
        if better {
            best = Some((mid, q));
        }
        // More noise means a lower ratio.
        if q > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (noise_std, ratio) = best.expect("at least one probe");
    if !in_band(ratio) {
        return Err(CoreError::CalibrationFailed {
            closest_noise: noise_std,
            closest_ratio: ratio,
        });
    }
    let medium_return = probe.expert_return() / ratio;
    Ok(Calibration {
        noise_std,
        ratio,
        expert_return: probe.expert_return(),
        medium_return,
        probes,
    })
}

/// Per task, `⌊0.7 n⌋` medium trajectories and `n − ⌊0.7 n⌋` expert ones,
/// each chosen without replacement.
pub fn mix(medium: &OfflineDataset, expert: &OfflineDataset, env: &EnvSpec, seed: u64) -> Result<OfflineDataset> {
    if medium.env != expert.env {
        return Err(CoreError::TaskMismatch(format!("{} vs {}", medium.env, expert.env)));
    }
    if medium.tasks != expert.tasks {
        return Err(CoreError::TaskMismatch("task lists differ".into()));
    }
    let mut trajectories = Vec::with_capacity(medium.tasks.len());
    for (i, task) in medium.tasks.iter().enumerate() {
        let (m, e) = (&medium.trajectories[i], &expert.trajectories[i]);
        if m.len() != e.len() {
            return Err(CoreError::TaskMismatch(format!(
                "task {} has {} medium and {} expert trajectories",
                task.task_id,
                m.len(),
                e.len()
            )));
        }
        let n = m.len();
        let n_med = mixed_medium_count(n);
        let mut rng = sub_rng(seed, Stream::Mix, task.task_id as u64);
        let mut med_idx = sample(&mut rng, n, n_med).into_vec();
        let mut exp_idx = sample(&mut rng, n, n - n_med).into_vec();
        med_idx.sort_unstable();
        exp_idx.sort_unstable();
        let mut chosen: Vec<Trajectory> = med_idx.iter().map(|&j| m[j].clone()).collect();
        chosen.extend(exp_idx.iter().map(|&j| e[j].clone()));
        trajectories.push(chosen);
    }
    OfflineDataset::new(env, DatasetType::Mixed, medium.tasks.clone(), trajectories, seed)
}

/// Indices of the `m` largest returns, best first; ties keep the lower index.
pub fn top_indices(returns: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..returns.len()).collect();
    idx.sort_by(|&a, &b| returns[b].total_cmp(&returns[a]));
    idx.truncate(m);
    idx
}

/// The task's `top_m` highest-return trajectories (all of them if fewer).
pub fn build_demo(dataset: &OfflineDataset, task_id: usize, top_m: usize) -> Result<Vec<Trajectory>> {
    let trajs = dataset
        .task_trajectories(task_id)
        .ok_or_else(|| CoreError::TaskMismatch(format!("task {task_id} not in dataset")))?;
    let returns: Vec<f64> = trajs.iter().map(Trajectory::total_return).collect();
    Ok(top_indices(&returns, top_m)
        .into_iter()
        .map(|i| trajs[i].clone())
        .collect())
}
