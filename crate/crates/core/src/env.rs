//! Point-Robot and its wind-perturbed variant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Split, TaskKind, TaskSpec, Vec2};
use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    PointRobot,
    PointRobotParam,
}

impl EnvName {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvName::PointRobot => "point_robot",
            EnvName::PointRobotParam => "point_robot_param",
        }
    }
}

impl std::fmt::Display for EnvName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EnvName {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_robot" => Ok(Self::PointRobot),
            "point_robot_param" => Ok(Self::PointRobotParam),
            other => Err(CoreError::InvalidConfig(format!("unknown environment `{other}`"))),
        }
    }
}

/// Axis-aligned box `[low, high]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range2 {
    pub low: Vec2,
    pub high: Vec2,
}

impl Range2 {
    pub fn square(low: f64, high: f64) -> Self {
        Self {
            low: [low, low],
            high: [high, high],
        }
    }

    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|d| p[d] >= self.low[d] && p[d] <= self.high[d])
    }

    /// True when the interiors do not overlap (shared edges are allowed).
    pub fn interior_disjoint(&self, other: &Range2) -> bool {
        (0..2).any(|d| self.high[d] <= other.low[d] || other.high[d] <= self.low[d])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec2 {
        [
            rng.random_range(self.low[0]..self.high[0]),
            rng.random_range(self.low[1]..self.high[1]),
        ]
    }

    fn check(&self) -> Result<()> {
        if (0..2).all(|d| self.low[d].is_finite() && self.high[d].is_finite() && self.low[d] < self.high[d]) {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(format!("degenerate range {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: EnvName,
    pub horizon: usize,
    pub action_bound: f64,
    /// Goal range for `point_robot`, wind range for `point_robot_param`.
    pub task_range: Range2,
    pub ood_range: Option<Range2>,
    /// Goal shared by every task of the wind variant.
    pub fixed_goal: Option<Vec2>,
}

impl EnvSpec {
    pub const HORIZON: usize = 20;
    pub const ACTION_BOUND: f64 = 0.1;

    pub fn point_robot() -> Self {
        Self {
            name: EnvName::PointRobot,
            horizon: Self::HORIZON,
            action_bound: Self::ACTION_BOUND,
            task_range: Range2::square(0.0, 1.0),
            ood_range: None,
            fixed_goal: None,
        }
    }

    pub fn point_robot_param() -> Self {
        Self {
            name: EnvName::PointRobotParam,
            horizon: Self::HORIZON,
            action_bound: Self::ACTION_BOUND,
            task_range: Range2::square(-0.05, 0.05),
            ood_range: None,
            fixed_goal: Some([0.5, 0.5]),
        }
    }

    pub fn new(name: EnvName) -> Self {
        match name {
            EnvName::PointRobot => Self::point_robot(),
            EnvName::PointRobotParam => Self::point_robot_param(),
        }
    }

    /// Adds a test-task range whose interior must not overlap the training range.
    pub fn with_ood_range(mut self, range: Range2) -> Result<Self> {
        range.check()?;
        if !range.interior_disjoint(&self.task_range) {
            return Err(CoreError::InvalidConfig(format!(
                "ood range {range:?} overlaps task range {:?}",
                self.task_range
            )));
        }
        self.ood_range = Some(range);
        Ok(self)
    }

    pub fn task_kind(&self) -> TaskKind {
        match self.name {
            EnvName::PointRobot => TaskKind::GoalReward,
            EnvName::PointRobotParam => TaskKind::DynamicsParam,
        }
    }

    fn task_param(task: &TaskSpec) -> Vec2 {
        task.goal.or(task.wind).unwrap_or([0.0, 0.0])
    }

    fn make_task(&self, task_id: usize, p: Vec2, split: Split) -> TaskSpec {
        match self.task_kind() {
            TaskKind::GoalReward => TaskSpec::goal_task(task_id, p, split),
            TaskKind::DynamicsParam => TaskSpec::wind_task(task_id, p, split),
        }
    }

    /// Kind matches the environment and the parameter lies in the task range,
    /// or in the ood range for test tasks.
    pub fn check_task(&self, task: &TaskSpec) -> Result<()> {
        task.check_kind()?;
        if task.kind != self.task_kind() {
            return Err(CoreError::InvalidTask(format!(
                "task {} is {:?} but {} expects {:?}",
                task.task_id,
                task.kind,
                self.name,
                self.task_kind()
            )));
        }
        let p = Self::task_param(task);
        let in_ood = task.split == Split::Test && self.ood_range.is_some_and(|r| r.contains(p));
        if self.task_range.contains(p) || in_ood {
            Ok(())
        } else {
            Err(CoreError::InvalidTask(format!(
                "task {} parameter {p:?} out of range",
                task.task_id
            )))
        }
    }

    /// The goal the reward is measured against.
    pub fn goal(&self, task: &TaskSpec) -> Vec2 {
        self.fixed_goal.or(task.goal).unwrap_or([0.0, 0.0])
    }

    pub fn wind(&self, task: &TaskSpec) -> Vec2 {
        task.wind.unwrap_or([0.0, 0.0])
    }

    pub fn clip_action(&self, a: Vec2) -> Vec2 {
        let b = self.action_bound;
        [a[0].clamp(-b, b), a[1].clamp(-b, b)]
    }

    /// Training tasks get ids `0..n_train`, test tasks `n_train..n_train+n_test`.
    pub fn sample_tasks(
        &self,
        n_train: usize,
        n_test: usize,
        seed: u64,
        ood: bool,
    ) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
        if n_train == 0 || n_test == 0 {
            return Err(CoreError::InvalidConfig(
                "need at least one train and one test task".into(),
            ));
        }
        let test_range = if ood {
            self.ood_range.ok_or(CoreError::MissingOodRange)?
        } else {
            self.task_range
        };
        let mut rng = stream_rng(seed, Stream::Tasks);
        let train = (0..n_train)
            .map(|i| self.make_task(i, self.task_range.sample(&mut rng), Split::Train))
            .collect();
        let test = (0..n_test)
            .map(|i| self.make_task(n_train + i, test_range.sample(&mut rng), Split::Test))
            .collect();
        Ok((train, test))
    }

    pub fn reset(&self, _task: &TaskSpec) -> EnvState {
        EnvState {
            position: [0.0, 0.0],
            t: 0,
            done: false,
        }
    }

    pub fn step(&self, state: &EnvState, task: &TaskSpec, action: Vec2) -> Result<(EnvState, f64)> {
        if state.done {
            return Err(CoreError::EpisodeFinished);
        }
        let a = self.clip_action(action);
        let w = self.wind(task);
        let p = [state.position[0] + a[0] + w[0], state.position[1] + a[1] + w[1]];
        let g = self.goal(task);
        let reward = -(p[0] - g[0]).hypot(p[1] - g[1]);
        let t = state.t + 1;
        Ok((
            EnvState {
                position: p,
                t,
                done: t == self.horizon,
            },
            reward,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: Vec2,
    pub t: usize,
    pub done: bool,
}
