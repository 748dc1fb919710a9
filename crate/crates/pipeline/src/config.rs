//! Pipeline configuration files.
//!
//! A TOML file with optional sections `[run]` (training and evaluation
//! hyperparameters), `[data]` (task and dataset sizes), `[paths]`,
//! `[sweep]` (axis values) and `[g_star]` (per-env target-return
//! multipliers). Missing keys take their defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metadt_core::{EnvName, Range2, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub trajectories_per_task: usize,
    /// Draw test tasks from `ood_range` instead of the training range.
    pub ood: bool,
    pub ood_range: Option<Range2>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train_tasks: 45,
            n_test_tasks: 5,
            trajectories_per_task: 100,
            ood: false,
            ood_range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output root used when `--out` is not given.
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub h: Vec<usize>,
    pub k: Vec<usize>,
    pub n_train_tasks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub run: RunConfig,
    pub data: DataConfig,
    pub paths: Paths,
    pub sweep: SweepAxes,
    /// Target-return multiplier per env name; overrides `run.target_return_multiplier`.
    pub g_star: BTreeMap<String, f64>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn multiplier(&self, env: EnvName) -> f64 {
        self.g_star
            .get(env.as_str())
            .copied()
            .unwrap_or(self.run.target_return_multiplier)
    }
}

/// Seed precedence: the flag, then the `SEED` environment variable, then the file.
pub fn resolve_seed(flag: Option<u64>, env_var: Option<&str>, file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env_var {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::InvalidArgument(format!("SEED={v} is not an unsigned integer"))),
        None => Ok(file),
    }
}

/// A sweep axis with its values, parsed from `name=v1,v2,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Axis {
    pub name: String,
    pub values: Vec<usize>,
}

impl std::str::FromStr for Axis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CliError::InvalidArgument(format!("axis `{s}` is not of the form name=v1,v2,..."));
        let (name, values) = s.split_once('=').ok_or_else(bad)?;
        let name = name.trim();
        if !["h", "k", "n_train_tasks"].contains(&name) {
            return Err(CliError::InvalidArgument(format!(
                "unknown sweep axis `{name}` (expected h, k or n_train_tasks)"
            )));
        }
        let values = values
            .split(',')
            .map(|v| v.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(bad());
        }
        Ok(Self {
            name: name.to_string(),
            values,
        })
    }
}

impl SweepAxes {
    /// Non-empty axes in `h, k, n_train_tasks` order.
    pub fn axes(&self) -> Vec<Axis> {
        [("h", &self.h), ("k", &self.k), ("n_train_tasks", &self.n_train_tasks)]
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(n, v)| Axis {
                name: n.to_string(),
                values: v.clone(),
            })
            .collect()
    }
}
