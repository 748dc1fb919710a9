//! Few-shot and zero-shot evaluation on held-out tasks.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{OfflineDataset, TaskSpec, Trajectory, Transition, Vec2};
use crate::env::EnvSpec;
use crate::error::{CoreError, Result};
use crate::policy::{get_prompt, AugmentedHistory, HistoryStep, MetaDt, PromptSegment};
use crate::rng::{sub_rng, Stream};
use crate::worldmodel::{ContextWindow, WorldModel};

/// Anything that picks an action from a prompt and a recent history.
pub trait Actor {
    fn uses_context(&self) -> bool;
    fn uses_prompt(&self) -> bool;
    fn act(&self, prompt: &PromptSegment, history: &AugmentedHistory) -> Result<Vec2>;
}

impl Actor for MetaDt {
    fn uses_context(&self) -> bool {
        self.ablation.uses_context()
    }

    fn uses_prompt(&self) -> bool {
        self.ablation.uses_prompt()
    }

    fn act(&self, prompt: &PromptSegment, history: &AugmentedHistory) -> Result<Vec2> {
        MetaDt::act(self, prompt, history)
    }
}

/// `multiplier ×` the best episode return found in `datasets`.
pub fn target_return(datasets: &[&OfflineDataset], multiplier: f64) -> Result<f64> {
    datasets
        .iter()
        .flat_map(|d| d.iter_trajectories())
        .map(Trajectory::total_return)
        .max_by(f64::total_cmp)
        .map(|g| multiplier * g)
        .ok_or(CoreError::EmptyDataset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub h: usize,
    pub history_len: usize,
    pub prompt_len: usize,
    pub episodes: usize,
    pub complementary: bool,
    pub prompt_per_episode: bool,
}

impl EvalSettings {
    pub fn from_run(cfg: &crate::RunConfig) -> Self {
        Self {
            h: cfg.h,
            history_len: cfg.history_len,
            prompt_len: cfg.prompt_len,
            episodes: cfg.eval_episodes,
            complementary: !cfg.ablation.no_complementary,
            prompt_per_episode: cfg.prompt_per_episode,
        }
    }
}

/// How often the prompt and demo machinery was touched.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounters {
    pub prompt_draws: usize,
    pub demo_appends: usize,
    pub encodes: usize,
}

/// Where prompts come from during a rollout.
pub struct PromptSource<'a> {
    pub demo: &'a [Trajectory],
    pub wm: Option<&'a WorldModel>,
    pub prompt_len: usize,
    pub complementary: bool,
    pub per_episode: bool,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    /// `R̂_t` fed to the policy at each step.
    pub rtg: Vec<f64>,
    /// Transformer input length at each step.
    pub token_counts: Vec<usize>,
}

/// One episode: the context is rebuilt from this episode only, the
/// return-to-go starts at `g_star` and drops by each reward, and the history
/// keeps the most recent `K` steps.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng>(
    env: &EnvSpec,
    task: &TaskSpec,
    actor: &dyn Actor,
    wm: Option<&WorldModel>,
    g_star: f64,
    prompts: Option<&PromptSource<'_>>,
    settings: &EvalSettings,
    rng: &mut R,
    counters: &mut EvalCounters,
) -> Result<Episode> {
    let mut state = env.reset(task);
    let mut steps: Vec<Transition> = Vec::with_capacity(env.horizon);
    let mut history = AugmentedHistory::default();
    let mut rtg_trace = Vec::with_capacity(env.horizon);
    let mut token_counts = Vec::with_capacity(env.horizon);
    let mut earned = 0.0;
    let mut cached: Option<PromptSegment> = None;
    let per_step = if actor.uses_context() { 4 } else { 3 };
    while !state.done {
        let z = if actor.uses_context() {
            let wm = wm.ok_or(CoreError::MissingWorldModel)?;
            counters.encodes += 1;
            Some(wm.encode(&ContextWindow::from_history(&steps, state.position, settings.h))?)
        } else {
            None
        };
        let rtg = g_star - earned;
        rtg_trace.push(rtg);
        history.steps.push(HistoryStep {
            z,
            rtg,
            state: state.position,
            action: [0.0, 0.0],
            timestep: state.t,
        });
        history.truncate_front(settings.history_len);
        let prompt = match prompts {
            Some(src) if actor.uses_prompt() => match &cached {
                Some(p) if src.per_episode => p.clone(),
                _ => {
                    counters.prompt_draws += 1;
                    let p = get_prompt(src.demo, src.wm, src.prompt_len, src.complementary, rng)?;
                    cached = Some(p.clone());
                    p
                }
            },
            _ => PromptSegment::empty(),
        };
        token_counts.push(3 * prompt.len() + per_step * history.len());
        let a = env.clip_action(actor.act(&prompt, &history)?);
        let (next, r) = env.step(&state, task, a)?;
        history.steps.last_mut().expect("just pushed").action = a;
        steps.push(Transition {
            s: state.position,
            a,
            r,
            s_next: next.position,
            t: state.t,
        });
        earned += r;
        state = next;
    }
    Ok(Episode {
        trajectory: Trajectory::new(task.task_id, steps, None)?,
        rtg: rtg_trace,
        token_counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    FewShot,
    ZeroShot,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::FewShot => "few_shot",
            EvalMode::ZeroShot => "zero_shot",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "few_shot" => Ok(EvalMode::FewShot),
            "zero_shot" => Ok(EvalMode::ZeroShot),
            other => Err(CoreError::InvalidConfig(format!("unknown eval mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task_id: usize,
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub length: usize,
}

/// Labels identifying an evaluation run in CSV output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunLabel {
    pub env: String,
    pub dataset_type: String,
    pub ablation: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub label: RunLabel,
    pub episodes: Vec<EpisodeRecord>,
    /// Scored return per task: the final episode's.
    pub task_scores: Vec<(usize, f64)>,
    pub mean: f64,
    /// Standard error over tasks.
    pub stderr: f64,
    pub counters: EvalCounters,
}

impl EvalReport {
    /// Scores each task by its last listed episode.
    pub fn from_episodes(
        mode: EvalMode,
        label: RunLabel,
        episodes: Vec<EpisodeRecord>,
        counters: EvalCounters,
    ) -> Self {
        let mut task_scores: Vec<(usize, f64)> = Vec::new();
        for e in &episodes {
            match task_scores.iter_mut().find(|(t, _)| *t == e.task_id) {
                Some(slot) => slot.1 = e.ret,
                None => task_scores.push((e.task_id, e.ret)),
            }
        }
        let scores: Vec<f64> = task_scores.iter().map(|s| s.1).collect();
        let (mean, stderr) = mean_stderr(&scores);
        Self {
            mode,
            label,
            episodes,
            task_scores,
            mean,
            stderr,
            counters,
        }
    }

    /// Columns `mode, env, dataset_type, ablation, seed, task_id, episode, return`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "mode",
            "env",
            "dataset_type",
            "ablation",
            "seed",
            "task_id",
            "episode",
            "return",
        ])?;
        for e in &self.episodes {
            out.write_record([
                self.mode.as_str().to_string(),
                self.label.env.clone(),
                self.label.dataset_type.clone(),
                self.label.ablation.clone(),
                self.label.seed.to_string(),
                e.task_id.to_string(),
                e.episode.to_string(),
                format!("{:.17e}", e.ret),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs `settings.episodes` episodes per task; each finished episode joins
/// the task's demo set, so the first one runs without a prompt.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_few_shot(
    env: &EnvSpec,
    tasks: &[TaskSpec],
    actor: &dyn Actor,
    wm: Option<&WorldModel>,
    g_star: f64,
    settings: &EvalSettings,
    label: RunLabel,
    seed: u64,
) -> Result<EvalReport> {
    let mut counters = EvalCounters::default();
    let mut episodes = Vec::new();
    for task in tasks {
        let mut rng = sub_rng(seed, Stream::Eval, task.task_id as u64);
        let mut demo: Vec<Trajectory> = Vec::with_capacity(settings.episodes);
        for ep in 0..settings.episodes {
            let source = PromptSource {
                demo: &demo,
                wm,
                prompt_len: settings.prompt_len,
                complementary: settings.complementary,
                per_episode: settings.prompt_per_episode,
            };
            let out = rollout(
                env,
                task,
                actor,
                wm,
                g_star,
                Some(&source),
                settings,
                &mut rng,
                &mut counters,
            )?;
            episodes.push(EpisodeRecord {
                task_id: task.task_id,
                episode: ep,
                ret: out.trajectory.total_return(),
                length: out.trajectory.len(),
            });
            demo.push(out.trajectory);
            counters.demo_appends += 1;
        }
    }
    Ok(EvalReport::from_episodes(EvalMode::FewShot, label, episodes, counters))
}

/// One prompt-free episode per task.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_zero_shot(
    env: &EnvSpec,
    tasks: &[TaskSpec],
    actor: &dyn Actor,
    wm: Option<&WorldModel>,
    g_star: f64,
    settings: &EvalSettings,
    label: RunLabel,
    seed: u64,
) -> Result<EvalReport> {
    let mut counters = EvalCounters::default();
    let mut episodes = Vec::new();
    for task in tasks {
        let mut rng = sub_rng(seed, Stream::Eval, task.task_id as u64);
        let out = rollout(env, task, actor, wm, g_star, None, settings, &mut rng, &mut counters)?;
        episodes.push(EpisodeRecord {
            task_id: task.task_id,
            episode: 0,
            ret: out.trajectory.total_return(),
            length: out.trajectory.len(),
        });
    }
    Ok(EvalReport::from_episodes(EvalMode::ZeroShot, label, episodes, counters))
}

/// Sample mean and standard error (`n − 1` denominator); zero error for
/// fewer than two values.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub env: String,
    pub dataset_type: String,
    pub method_variant: String,
    pub mean: f64,
    pub stderr: f64,
    pub seeds: usize,
}

/// One row per (env, dataset, variant, mode): the mean over seeds of each
/// seed's task-mean score, with its standard error across seeds. Zero-shot
/// variants carry a `_zero_shot` suffix. Rows keep first-seen order.
pub fn aggregate(reports: &[EvalReport]) -> Vec<SummaryRow> {
    let mut groups: Vec<((String, String, String), Vec<f64>)> = Vec::new();
    for r in reports {
        let variant = match r.mode {
            EvalMode::FewShot => r.label.ablation.clone(),
            EvalMode::ZeroShot => format!("{}_zero_shot", r.label.ablation),
        };
        let key = (r.label.env.clone(), r.label.dataset_type.clone(), variant);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.mean),
            None => groups.push((key, vec![r.mean])),
        }
    }
    groups
        .into_iter()
        .map(|((env, dataset_type, method_variant), v)| {
            let (mean, stderr) = mean_stderr(&v);
            SummaryRow {
                env,
                dataset_type,
                method_variant,
                mean,
                stderr,
                seeds: v.len(),
            }
        })
        .collect()
}

/// Columns `env, dataset_type, method_variant, mean, stderr`.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["env", "dataset_type", "method_variant", "mean", "stderr"])?;
    for r in rows {
        out.write_record([
            r.env.clone(),
            r.dataset_type.clone(),
            r.method_variant.clone(),
            format!("{:.17e}", r.mean),
            format!("{:.17e}", r.stderr),
        ])?;
    }
    out.flush()?;
    Ok(())
}
