//! Offline meta-RL on Point-Robot: task sampling, scripted data collection,
//! a context-aware world model, the context-conditioned decision transformer
//! and its few-/zero-shot evaluation.

pub mod config;
pub mod data;
pub mod datagen;
pub mod env;
mod error;
pub mod eval;
pub mod io;
pub mod policy;
pub mod rng;
pub mod worldmodel;

pub use config::{Ablation, RunConfig};
pub use data::{
    compute_stats, normalize_state, return_to_go, DatasetType, NormalizationStats, OfflineDataset, Source, Split,
    TaskKind, TaskSpec, Trajectory, Transition, Vec2,
};
pub use env::{EnvName, EnvSpec, EnvState, Range2};
pub use error::{CoreError, Result};
