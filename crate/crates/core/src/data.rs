//! Tasks, transitions, trajectories and offline datasets.

use serde::{Deserialize, Serialize};

use crate::env::{EnvName, EnvSpec};
use crate::error::{CoreError, Result};

pub type Vec2 = [f64; 2];

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    GoalReward,
    DynamicsParam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec2>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wind: Option<Vec2>,
    pub split: Split,
}

impl TaskSpec {
    pub fn goal_task(task_id: usize, goal: Vec2, split: Split) -> Self {
        Self {
            task_id,
            kind: TaskKind::GoalReward,
            goal: Some(goal),
            wind: None,
            split,
        }
    }

    pub fn wind_task(task_id: usize, wind: Vec2, split: Split) -> Self {
        Self {
            task_id,
            kind: TaskKind::DynamicsParam,
            goal: None,
            wind: Some(wind),
            split,
        }
    }

    /// Checks that exactly the parameter matching `kind` is present.
    pub fn check_kind(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::GoalReward => self.goal.is_some() && self.wind.is_none(),
            TaskKind::DynamicsParam => self.wind.is_some() && self.goal.is_none(),
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidTask(format!(
                "task {} of kind {:?} has goal {:?} and wind {:?}",
                self.task_id, self.kind, self.goal, self.wind
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec2,
    pub a: Vec2,
    pub r: f64,
    pub s_next: Vec2,
    pub t: usize,
}

/// Which behavior policy produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Medium,
    Expert,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task_id: usize,
    steps: Vec<Transition>,
    rtg: Vec<f64>,
    pub source: Option<Source>,
}

impl Trajectory {
    /// Validates chaining and timestep order, then fills the return-to-go.
    pub fn new(task_id: usize, steps: Vec<Transition>, source: Option<Source>) -> Result<Self> {
        let rewards: Vec<f64> = steps.iter().map(|s| s.r).collect();
        let rtg = return_to_go(&rewards)?;
        for (i, st) in steps.iter().enumerate() {
            if st.t != i {
                return Err(CoreError::InvalidTrajectory(format!("step {i} has timestep {}", st.t)));
            }
            if let Some(next) = steps.get(i + 1) {
                if st.s_next != next.s {
                    return Err(CoreError::InvalidTrajectory(format!(
                        "s_next at step {i} is {:?} but step {} starts at {:?}",
                        st.s_next,
                        i + 1,
                        next.s
                    )));
                }
            }
        }
        Ok(Self {
            task_id,
            steps,
            rtg,
            source,
        })
    }

    pub fn steps(&self) -> &[Transition] {
        &self.steps
    }

    pub fn rtg(&self) -> &[f64] {
        &self.rtg
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rtg[0]
    }

    /// `s_0 .. s_T`, one more entry than there are steps.
    pub fn states(&self) -> Vec<Vec2> {
        let mut out: Vec<Vec2> = self.steps.iter().map(|s| s.s).collect();
        out.push(self.steps[self.steps.len() - 1].s_next);
        out
    }

    /// Checks the environment-specific bounds: length and action range.
    pub fn check_env(&self, env: &EnvSpec) -> Result<()> {
        if self.len() > env.horizon {
            return Err(CoreError::InvalidTrajectory(format!(
                "length {} exceeds horizon {}",
                self.len(),
                env.horizon
            )));
        }
        for st in &self.steps {
            if st.a.iter().any(|a| a.is_nan() || a.abs() > env.action_bound) {
                return Err(CoreError::InvalidTrajectory(format!(
                    "action {:?} at step {} outside ±{}",
                    st.a, st.t, env.action_bound
                )));
            }
        }
        Ok(())
    }
}

/// Undiscounted suffix sums: `out[t] = Σ_{i≥t} rewards[i]`.
pub fn return_to_go(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(CoreError::EmptyTrajectory);
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, &r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetType {
    Medium,
    Expert,
    Mixed,
}

impl DatasetType {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetType::Medium => "medium",
            DatasetType::Expert => "expert",
            DatasetType::Mixed => "mixed",
        }
    }
}

impl std::fmt::Display for DatasetType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DatasetType {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            "mixed" => Ok(Self::Mixed),
            other => Err(CoreError::InvalidConfig(format!("unknown dataset type `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub state_mean: Vec2,
    pub state_std: Vec2,
}

impl NormalizationStats {
    pub fn identity() -> Self {
        Self {
            state_mean: [0.0, 0.0],
            state_std: [1.0, 1.0],
        }
    }

    pub fn normalize(&self, s: Vec2) -> Vec2 {
        normalize_state(s, self)
    }
}

pub fn normalize_state(s: Vec2, stats: &NormalizationStats) -> Vec2 {
    [
        (s[0] - stats.state_mean[0]) / stats.state_std[0],
        (s[1] - stats.state_mean[1]) / stats.state_std[1],
    ]
}

/// Mean and population standard deviation of `states`, std floored at
/// [`STD_FLOOR`].
pub fn stats_of_states<'a>(states: impl Iterator<Item = &'a Vec2> + Clone) -> Result<NormalizationStats> {
    let mut n = 0usize;
    let mut sum = [0.0; 2];
    for s in states.clone() {
        n += 1;
        sum[0] += s[0];
        sum[1] += s[1];
    }
    if n == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let mean = [sum[0] / n as f64, sum[1] / n as f64];
    let mut sq = [0.0; 2];
    for s in states {
        sq[0] += (s[0] - mean[0]).powi(2);
        sq[1] += (s[1] - mean[1]).powi(2);
    }
    let std = [
        (sq[0] / n as f64).sqrt().max(STD_FLOOR),
        (sq[1] / n as f64).sqrt().max(STD_FLOOR),
    ];
    Ok(NormalizationStats {
        state_mean: mean,
        state_std: std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvName,
    pub dataset_type: DatasetType,
    pub tasks: Vec<TaskSpec>,
    /// `trajectories[i]` belongs to `tasks[i]`.
    pub trajectories: Vec<Vec<Trajectory>>,
    pub stats: NormalizationStats,
    pub seed: u64,
}

/// Statistics over the `s` field of every transition.
pub fn compute_stats(dataset: &OfflineDataset) -> Result<NormalizationStats> {
    let states: Vec<Vec2> = dataset
        .trajectories
        .iter()
        .flatten()
        .flat_map(|t| t.steps().iter().map(|s| s.s))
        .collect();
    stats_of_states(states.iter())
}

impl OfflineDataset {
    /// Builds a dataset, computing statistics and checking invariants.
    pub fn new(
        env: &EnvSpec,
        dataset_type: DatasetType,
        tasks: Vec<TaskSpec>,
        trajectories: Vec<Vec<Trajectory>>,
        seed: u64,
    ) -> Result<Self> {
        let mut ds = Self {
            env: env.name,
            dataset_type,
            tasks,
            trajectories,
            stats: NormalizationStats::identity(),
            seed,
        };
        ds.stats = compute_stats(&ds)?;
        ds.validate(env)?;
        Ok(ds)
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    pub fn num_transitions(&self) -> usize {
        self.trajectories.iter().flatten().map(Trajectory::len).sum()
    }

    pub fn task_index(&self, task_id: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.task_id == task_id)
    }

    pub fn task_trajectories(&self, task_id: usize) -> Option<&[Trajectory]> {
        self.task_index(task_id).map(|i| self.trajectories[i].as_slice())
    }

    pub fn iter_trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().flatten()
    }

    pub fn validate(&self, env: &EnvSpec) -> Result<()> {
        if self.env != env.name {
            return Err(CoreError::InvalidConfig(format!(
                "dataset is for {} but environment is {}",
                self.env, env.name
            )));
        }
        if self.tasks.len() != self.trajectories.len() {
            return Err(CoreError::InvalidTrajectory(format!(
                "{} tasks but {} trajectory lists",
                self.tasks.len(),
                self.trajectories.len()
            )));
        }
        for (i, task) in self.tasks.iter().enumerate() {
            env.check_task(task)?;
            if self.tasks[..i].iter().any(|t| t.task_id == task.task_id) {
                return Err(CoreError::InvalidTask(format!("duplicate task id {}", task.task_id)));
            }
        }
        for (task, trajs) in self.tasks.iter().zip(&self.trajectories) {
            for traj in trajs {
                if traj.task_id != task.task_id {
                    return Err(CoreError::InvalidTrajectory(format!(
                        "trajectory for task {} filed under task {}",
                        traj.task_id, task.task_id
                    )));
                }
                traj.check_env(env)?;
            }
            if self.dataset_type == DatasetType::Mixed {
                let n = trajs.len();
                let medium = trajs.iter().filter(|t| t.source == Some(Source::Medium)).count();
                let expert = trajs.iter().filter(|t| t.source == Some(Source::Expert)).count();
                if medium != mixed_medium_count(n) || medium + expert != n {
                    return Err(CoreError::InvalidTrajectory(format!(
                        "mixed task {} has {medium} medium and {expert} expert of {n}",
                        task.task_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Number of medium-sourced trajectories in a mixed task of `n`: `⌊0.7 n⌋`.
pub fn mixed_medium_count(n: usize) -> usize {
    n * 7 / 10
}
