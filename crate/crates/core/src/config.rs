use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which parts of Meta-DT are switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_context: bool,
    pub no_complementary: bool,
    pub no_prompt: bool,
}

impl Ablation {
    pub const FULL: Self = Self {
        no_context: false,
        no_complementary: false,
        no_prompt: false,
    };
    pub const NO_CONTEXT: Self = Self {
        no_context: true,
        ..Self::FULL
    };
    pub const NO_COMPLEMENTARY: Self = Self {
        no_complementary: true,
        ..Self::FULL
    };
    pub const NO_PROMPT: Self = Self {
        no_prompt: true,
        ..Self::FULL
    };
    pub const DT: Self = Self {
        no_context: true,
        no_complementary: false,
        no_prompt: true,
    };

    pub fn uses_context(&self) -> bool {
        !self.no_context
    }

    pub fn uses_prompt(&self) -> bool {
        !self.no_prompt
    }

    /// The world model is read for task representations and for prompt
    /// scoring; plain DT needs neither.
    pub fn needs_world_model(&self) -> bool {
        self.uses_context() || (self.uses_prompt() && !self.no_complementary)
    }

    pub fn label(&self) -> &'static str {
        match (self.no_context, self.no_complementary, self.no_prompt) {
            (false, false, false) => "meta_dt",
            (true, false, false) => "no_context",
            (false, true, false) => "no_com",
            (false, _, true) => "no_prompt",
            (true, _, true) => "dt",
            (true, true, false) => "no_context_no_com",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "meta_dt" | "full" | "none" => Ok(Self::FULL),
            "no_context" => Ok(Self::NO_CONTEXT),
            "no_com" | "no_complementary" => Ok(Self::NO_COMPLEMENTARY),
            "no_prompt" => Ok(Self::NO_PROMPT),
            "dt" => Ok(Self::DT),
            other => Err(CoreError::InvalidConfig(format!("unknown ablation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Hyperparameters for one run. Defaults are the Point-Robot settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Context horizon of the world-model encoder.
    pub h: usize,
    /// History length `K` fed to the policy.
    #[serde(rename = "K")]
    pub history_len: usize,
    /// Prompt length `k`.
    #[serde(rename = "k")]
    pub prompt_len: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: u64,
    pub lr: f64,
    pub training_steps: usize,
    pub wm_lr: f64,
    pub wm_batch_size: usize,
    pub wm_steps: usize,
    pub wm_warmup_steps: u64,
    pub eval_episodes: usize,
    pub target_return_multiplier: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub wm_hidden: usize,
    pub z_dim: usize,
    pub demo_top_m: usize,
    /// Reuse one prompt for a whole evaluation episode instead of drawing a
    /// fresh one every step.
    pub prompt_per_episode: bool,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            h: 4,
            history_len: 8,
            prompt_len: 3,
            batch_size: 128,
            dropout: 0.1,
            weight_decay: 1e-4,
            grad_clip: 0.25,
            warmup_steps: 10_000,
            lr: 1e-4,
            training_steps: 100_000,
            wm_lr: 3e-4,
            wm_batch_size: 128,
            wm_steps: 20_000,
            wm_warmup_steps: 0,
            eval_episodes: 5,
            target_return_multiplier: 1.0,
            seed: 0,
            ablation: Ablation::FULL,
            embed_dim: 128,
            n_layers: 3,
            n_heads: 1,
            wm_hidden: 128,
            z_dim: 16,
            demo_top_m: 5,
            prompt_per_episode: false,
            log_every: 100,
        }
    }
}

impl RunConfig {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if !(self.prompt_len < self.history_len && self.history_len < horizon) {
            return bad(format!(
                "need k < K < horizon, got k={} K={} horizon={horizon}",
                self.prompt_len, self.history_len
            ));
        }
        let counts = [
            ("h", self.h),
            ("k", self.prompt_len),
            ("batch_size", self.batch_size),
            ("training_steps", self.training_steps),
            ("wm_steps", self.wm_steps),
            ("wm_batch_size", self.wm_batch_size),
            ("eval_episodes", self.eval_episodes),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("wm_hidden", self.wm_hidden),
            ("z_dim", self.z_dim),
            ("demo_top_m", self.demo_top_m),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.n_heads
            ));
        }
        let rates = [("lr", self.lr), ("wm_lr", self.wm_lr), ("grad_clip", self.grad_clip)];
        if let Some((name, v)) = rates.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return bad(format!("{name} must be positive, got {v}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || !self.target_return_multiplier.is_finite() {
            return bad("weight_decay must be non-negative and target_return_multiplier finite".into());
        }
        Ok(())
    }
}
