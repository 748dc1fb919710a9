//! JSON-lines dataset files.
//!
//! Line 0 is the manifest `{env, type, seed, tasks, stats}`; every further
//! line is one trajectory `{task_id, source, s, a, r, rtg}` where `s` holds
//! `len + 1` states (the last one is the final successor state). Floats are
//! written with 17 significant digits so reading back is exact.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::data::{
    compute_stats, return_to_go, DatasetType, NormalizationStats, OfflineDataset, Source, Split, TaskKind, TaskSpec,
    Trajectory, Transition,
};
use crate::env::{EnvName, EnvSpec};
use crate::error::{CoreError, Result};

/// A float that serializes in `{:.16e}` form and deserializes as a plain number.
#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(transparent)]
pub struct F17(pub f64);

impl Serialize for F17 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom(format!("non-finite number {}", self.0)));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

fn v2(p: [f64; 2]) -> [F17; 2] {
    [F17(p[0]), F17(p[1])]
}

fn un2(p: [F17; 2]) -> [f64; 2] {
    [p[0].0, p[1].0]
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskLine {
    task_id: usize,
    kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    goal: Option<[F17; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wind: Option<[F17; 2]>,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsLine {
    state_mean: [F17; 2],
    state_std: [F17; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    env: EnvName,
    #[serde(rename = "type")]
    dataset_type: DatasetType,
    seed: u64,
    tasks: Vec<TaskLine>,
    stats: StatsLine,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryLine {
    task_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source: Option<Source>,
    s: Vec<[F17; 2]>,
    a: Vec<[F17; 2]>,
    r: Vec<F17>,
    rtg: Vec<F17>,
}

fn task_line(t: &TaskSpec) -> TaskLine {
    TaskLine {
        task_id: t.task_id,
        kind: t.kind,
        goal: t.goal.map(v2),
        wind: t.wind.map(v2),
        split: t.split,
    }
}

pub fn task_to_line(t: &TaskSpec) -> String {
    serde_json::to_string(&task_line(t)).expect("finite task parameters")
}

fn task_from_line(t: TaskLine) -> TaskSpec {
    TaskSpec {
        task_id: t.task_id,
        kind: t.kind,
        goal: t.goal.map(un2),
        wind: t.wind.map(un2),
        split: t.split,
    }
}

pub fn write_dataset<W: Write>(ds: &OfflineDataset, mut w: W) -> Result<()> {
    let manifest = Manifest {
        env: ds.env,
        dataset_type: ds.dataset_type,
        seed: ds.seed,
        tasks: ds.tasks.iter().map(task_line).collect(),
        stats: StatsLine {
            state_mean: v2(ds.stats.state_mean),
            state_std: v2(ds.stats.state_std),
        },
    };
    serde_json::to_writer(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    for traj in ds.iter_trajectories() {
        let line = TrajectoryLine {
            task_id: traj.task_id,
            source: traj.source,
            s: traj.states().into_iter().map(v2).collect(),
            a: traj.steps().iter().map(|s| v2(s.a)).collect(),
            r: traj.steps().iter().map(|s| F17(s.r)).collect(),
            rtg: traj.rtg().iter().map(|&x| F17(x)).collect(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn format_err(line: usize, detail: impl std::fmt::Display) -> CoreError {
    CoreError::Format {
        line,
        detail: detail.to_string(),
    }
}

/// Parses and fully validates a dataset file against `env`.
pub fn read_dataset<R: Read>(r: R, env: &EnvSpec) -> Result<OfflineDataset> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or_else(|| format_err(0, "missing manifest"))??;
    let manifest: Manifest = serde_json::from_str(&first).map_err(|e| format_err(0, e))?;
    let tasks: Vec<TaskSpec> = manifest.tasks.into_iter().map(task_from_line).collect();
    let mut trajectories: Vec<Vec<Trajectory>> = vec![Vec::new(); tasks.len()];
    for (i, line) in lines.enumerate() {
        let n = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tl: TrajectoryLine = serde_json::from_str(&line).map_err(|e| format_err(n, e))?;
        let len = tl.a.len();
        if tl.s.len() != len + 1 || tl.r.len() != len || tl.rtg.len() != len {
            return Err(format_err(
                n,
                format!(
                    "lengths s={} a={} r={} rtg={}",
                    tl.s.len(),
                    len,
                    tl.r.len(),
                    tl.rtg.len()
                ),
            ));
        }
        let slot = tasks
            .iter()
            .position(|t| t.task_id == tl.task_id)
            .ok_or_else(|| format_err(n, format!("unknown task {}", tl.task_id)))?;
        let steps: Vec<Transition> = (0..len)
            .map(|t| Transition {
                s: un2(tl.s[t]),
                a: un2(tl.a[t]),
                r: tl.r[t].0,
                s_next: un2(tl.s[t + 1]),
                t,
            })
            .collect();
        let traj = Trajectory::new(tl.task_id, steps, tl.source).map_err(|e| format_err(n, e))?;
        let stored: Vec<f64> = tl.rtg.iter().map(|x| x.0).collect();
        let rewards: Vec<f64> = tl.r.iter().map(|x| x.0).collect();
        if return_to_go(&rewards)? != stored {
            return Err(format_err(n, "rtg is not the suffix sum of r"));
        }
        trajectories[slot].push(traj);
    }
    let ds = OfflineDataset {
        env: manifest.env,
        dataset_type: manifest.dataset_type,
        tasks,
        trajectories,
        stats: NormalizationStats {
            state_mean: un2(manifest.stats.state_mean),
            state_std: un2(manifest.stats.state_std),
        },
        seed: manifest.seed,
    };
    ds.validate(env)?;
    if compute_stats(&ds)? != ds.stats {
        return Err(format_err(0, "stats do not match the trajectories"));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &OfflineDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>, env: &EnvSpec) -> Result<OfflineDataset> {
    read_dataset(std::fs::File::open(path)?, env)
}

/// Task lists as JSON lines, one [`TaskSpec`] per line.
pub fn write_tasks<W: Write>(tasks: &[TaskSpec], mut w: W) -> Result<()> {
    for t in tasks {
        serde_json::to_writer(&mut w, &task_line(t))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_tasks<R: Read>(r: R) -> Result<Vec<TaskSpec>> {
    BufReader::new(r)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, l)| {
            let l = l?;
            let t: TaskLine = serde_json::from_str(&l).map_err(|e| format_err(i, e))?;
            Ok(task_from_line(t))
        })
        .collect()
}
