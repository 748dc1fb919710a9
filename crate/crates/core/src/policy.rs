//! The context-conditioned decision transformer: token assembly, the causal
//! transformer, prompt construction and training.

use metadt_nn::{
    adam_step, AdamConfig, Embedding, Graph, LayerNorm, Linear, NnError, ParameterStore, Scalar, Tensor,
    TransformerBlock, Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Ablation, RunConfig};
use crate::data::{NormalizationStats, OfflineDataset, Trajectory, Vec2};
use crate::datagen::build_demo;
use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, sub_rng, Stream};
use crate::worldmodel::{select_segment_from_errors, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Z,
    Rtg,
    State,
    Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptStep {
    pub rtg: f64,
    pub state: Vec2,
    pub action: Vec2,
    pub timestep: usize,
}

/// Up to `k` consecutive steps of a demonstration, with that trajectory's
/// own return-to-go values and timesteps.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptSegment {
    pub steps: Vec<PromptStep>,
}

impl PromptSegment {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Steps `j .. j + k` of `traj` (fewer if it ends first).
    pub fn from_trajectory(traj: &Trajectory, j: usize, k: usize) -> Self {
        let end = (j + k).min(traj.len());
        let steps = (j.min(end)..end)
            .map(|t| {
                let st = traj.steps()[t];
                PromptStep {
                    rtg: traj.rtg()[t],
                    state: st.s,
                    action: st.a,
                    timestep: t,
                }
            })
            .collect();
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryStep {
    /// Task representation; absent when the policy runs without context.
    pub z: Option<Vec<f64>>,
    pub rtg: f64,
    pub state: Vec2,
    /// Taken action; the final step's action is not yet known at decision
    /// time and is left at zero.
    pub action: Vec2,
    pub timestep: usize,
}

/// The most recent steps of the current episode, oldest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentedHistory {
    pub steps: Vec<HistoryStep>,
}

impl AugmentedHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Keeps only the last `k` steps.
    pub fn truncate_front(&mut self, k: usize) {
        let n = self.steps.len();
        if n > k {
            self.steps.drain(..n - k);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub modality: Modality,
    pub timestep: usize,
    /// Raw values; states are normalized when embedded.
    pub values: Vec<f64>,
}

/// Prompt tokens `(R̂, s, a)` per step followed by history tokens
/// `(z, R̂, s, a)` per step (`(R̂, s, a)` without context).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    /// Positions of every state token, prompt and history.
    pub state_positions: Vec<usize>,
    /// True only on history state tokens.
    pub loss_mask: Vec<bool>,
    /// Target action per state token (the action taken at that step).
    pub targets: Vec<Vec2>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn assemble(prompt: &PromptSegment, history: &AugmentedHistory, use_context: bool) -> Result<TokenSequence> {
    if history.is_empty() {
        return Err(CoreError::EmptyHistory);
    }
    let per_step = if use_context { 4 } else { 3 };
    let n = 3 * prompt.len() + per_step * history.len();
    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(n),
        state_positions: Vec::with_capacity(prompt.len() + history.len()),
        loss_mask: Vec::with_capacity(n),
        targets: Vec::with_capacity(prompt.len() + history.len()),
    };
    let push = |seq: &mut TokenSequence, modality, timestep, values: Vec<f64>, head: Option<(bool, Vec2)>| {
        if let Some((in_loss, target)) = head {
            seq.state_positions.push(seq.tokens.len());
            seq.targets.push(target);
            seq.loss_mask.push(in_loss);
        } else {
            seq.loss_mask.push(false);
        }
        seq.tokens.push(Token {
            modality,
            timestep,
            values,
        });
    };
    for p in &prompt.steps {
        push(&mut seq, Modality::Rtg, p.timestep, vec![p.rtg], None);
        push(
            &mut seq,
            Modality::State,
            p.timestep,
            p.state.to_vec(),
            Some((false, p.action)),
        );
        push(&mut seq, Modality::Action, p.timestep, p.action.to_vec(), None);
    }
    for h in &history.steps {
        if use_context {
            let z =
                h.z.clone()
                    .ok_or_else(|| CoreError::InvalidConfig("history step lacks z".into()))?;
            push(&mut seq, Modality::Z, h.timestep, z, None);
        }
        push(&mut seq, Modality::Rtg, h.timestep, vec![h.rtg], None);
        push(
            &mut seq,
            Modality::State,
            h.timestep,
            h.state.to_vec(),
            Some((true, h.action)),
        );
        push(&mut seq, Modality::Action, h.timestep, h.action.to_vec(), None);
    }
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaDtConfig {
    pub z_dim: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_timestep: usize,
    pub action_bound: f64,
}

impl MetaDtConfig {
    pub fn from_run(cfg: &RunConfig, horizon: usize, action_bound: f64) -> Self {
        Self {
            z_dim: cfg.z_dim,
            embed_dim: cfg.embed_dim,
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            dropout: cfg.dropout,
            max_timestep: horizon,
            action_bound,
        }
    }
}

/// Layer layout of the transformer policy.
#[derive(Debug, Clone)]
pub struct MetaDtNet {
    pub config: MetaDtConfig,
    pub embed_z: Linear,
    pub embed_rtg: Linear,
    pub embed_state: Linear,
    pub embed_action: Linear,
    pub timestep: Embedding,
    pub ln_embed: LayerNorm,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub head: Linear,
}

/// Forward pass over a left-padded batch.
pub struct BatchOutput {
    /// `[S, 2]` action predictions, one row per state token in batch order.
    pub actions: Var,
    /// `(sequence, position in its own sequence)` for each row of `actions`.
    pub heads: Vec<(usize, usize)>,
}

impl MetaDtNet {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParameterStore<T>, config: MetaDtConfig, rng: &mut R) -> Result<Self> {
        let d = config.embed_dim;
        Ok(Self {
            config,
            embed_z: Linear::new(store, "mdt.embed.z", config.z_dim, d, rng)?,
            embed_rtg: Linear::new(store, "mdt.embed.rtg", 1, d, rng)?,
            embed_state: Linear::new(store, "mdt.embed.state", 2, d, rng)?,
            embed_action: Linear::new(store, "mdt.embed.action", 2, d, rng)?,
            timestep: Embedding::new(store, "mdt.embed.timestep", config.max_timestep, d, rng)?,
            ln_embed: LayerNorm::new(store, "mdt.ln_embed", d)?,
            blocks: (0..config.n_layers)
                .map(|i| TransformerBlock::new(store, &format!("mdt.block{i}"), d, config.n_heads, config.dropout, rng))
                .collect::<std::result::Result<_, _>>()?,
            ln_final: LayerNorm::new(store, "mdt.ln_final", d)?,
            head: Linear::new(store, "mdt.head", d, 2, rng)?,
        })
    }

    fn embedder(&self, m: Modality) -> &Linear {
        match m {
            Modality::Z => &self.embed_z,
            Modality::Rtg => &self.embed_rtg,
            Modality::State => &self.embed_state,
            Modality::Action => &self.embed_action,
        }
    }

    /// Runs the transformer over `seqs`, left-padding shorter sequences with
    /// masked tokens, and predicts an action at every state token.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[TokenSequence],
        stats: &NormalizationStats,
    ) -> Result<BatchOutput> {
        if seqs.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let b = seqs.len();
        let l = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
        const ORDER: [Modality; 4] = [Modality::Z, Modality::Rtg, Modality::State, Modality::Action];

        // Rows of each modality, in (sequence, position) order.
        let mut rows: [Vec<f64>; 4] = Default::default();
        let mut counts = [0usize; 4];
        let mut slot: Vec<Option<(usize, usize)>> = vec![None; b * l];
        let mut steps: Vec<Option<usize>> = vec![None; b * l];
        for (si, seq) in seqs.iter().enumerate() {
            let off = l - seq.len();
            for (p, tok) in seq.tokens.iter().enumerate() {
                let m = ORDER.iter().position(|&m| m == tok.modality).expect("known modality");
                let vals: Vec<f64> = match tok.modality {
                    Modality::State => stats.normalize([tok.values[0], tok.values[1]]).to_vec(),
                    _ => tok.values.clone(),
                };
                if vals.len() != self.embedder(tok.modality).fan_in {
                    return Err(CoreError::InvalidConfig(format!(
                        "{:?} token of width {}, expected {}",
                        tok.modality,
                        vals.len(),
                        self.embedder(tok.modality).fan_in
                    )));
                }
                if tok.timestep >= self.config.max_timestep {
                    return Err(CoreError::Index {
                        index: tok.timestep,
                        len: self.config.max_timestep,
                    });
                }
                rows[m].extend(vals);
                slot[si * l + off + p] = Some((m, counts[m]));
                steps[si * l + off + p] = Some(tok.timestep);
                counts[m] += 1;
            }
        }
        let mut parts = Vec::new();
        let mut base = [0usize; 4];
        let mut total = 0;
        for (m, modality) in ORDER.iter().enumerate() {
            base[m] = total;
            if counts[m] == 0 {
                continue;
            }
            let lin = self.embedder(*modality);
            let x = g.input(Tensor::from_f64(&[counts[m], lin.fan_in], &rows[m])?);
            parts.push(lin.forward(g, x)?);
            total += counts[m];
        }
        let all = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let idx: Vec<Option<usize>> = slot.iter().map(|s| s.map(|(m, i)| base[m] + i)).collect();
        let tokens = g.gather_rows(all, idx)?;
        let time = self.timestep.forward(g, &steps)?;
        let x = g.add(tokens, time)?;
        let x = self.ln_embed.forward(g, x)?;
        let mut x = g.dropout(x, self.config.dropout);
        let valid: Vec<bool> = slot.iter().map(Option::is_some).collect();
        for block in &self.blocks {
            x = block.forward(g, x, b, l, Some(&valid))?;
        }
        let x = self.ln_final.forward(g, x)?;

        let mut heads = Vec::new();
        let mut rows_idx = Vec::new();
        for (si, seq) in seqs.iter().enumerate() {
            let off = l - seq.len();
            for &p in &seq.state_positions {
                heads.push((si, p));
                rows_idx.push(Some(si * l + off + p));
            }
        }
        let h = g.gather_rows(x, rows_idx)?;
        let a = self.head.forward(g, h)?;
        let a = g.tanh(a);
        let actions = g.scale(a, self.config.action_bound);
        Ok(BatchOutput { actions, heads })
    }

    /// Mean squared error over the loss-masked (history) heads.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seqs: &[TokenSequence],
        stats: &NormalizationStats,
    ) -> Result<Var> {
        let out = self.forward(g, seqs, stats)?;
        let (rows, targets) = loss_rows(seqs);
        if rows.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let n = rows.len();
        let pred = g.gather_rows(out.actions, rows.into_iter().map(Some).collect())?;
        Ok(g.mse(pred, Tensor::from_f64(&[n, 2], &targets)?)?)
    }
}

/// Row indices (into the stacked state heads) and flattened targets of the
/// loss-masked heads.
fn loss_rows(seqs: &[TokenSequence]) -> (Vec<usize>, Vec<f64>) {
    let mut row = 0;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for seq in seqs {
        for (i, &p) in seq.state_positions.iter().enumerate() {
            if seq.loss_mask[p] {
                rows.push(row);
                targets.extend(seq.targets[i]);
            }
            row += 1;
        }
    }
    (rows, targets)
}

/// Trained policy parameters with the normalization and ablation they belong to.
#[derive(Debug, Clone)]
pub struct MetaDt {
    pub net: MetaDtNet,
    pub params: ParameterStore<f32>,
    pub stats: NormalizationStats,
    pub ablation: Ablation,
}

impl MetaDt {
    pub fn new(config: MetaDtConfig, stats: NormalizationStats, ablation: Ablation, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        let mut rng = stream_rng(seed, Stream::PolicyInit);
        let net = MetaDtNet::new(&mut params, config, &mut rng)?;
        Ok(Self {
            net,
            params,
            stats,
            ablation,
        })
    }

    pub fn from_params(
        config: MetaDtConfig,
        stats: NormalizationStats,
        ablation: Ablation,
        params: ParameterStore<f32>,
    ) -> Result<Self> {
        let mut fresh = Self::new(config, stats, ablation, 0)?;
        fresh.params.load_values_from(&params)?;
        Ok(fresh)
    }

    pub fn config(&self) -> MetaDtConfig {
        self.net.config
    }

    /// Predictions at every state token of one sequence, dropout off.
    pub fn predict(&self, seq: &TokenSequence) -> Result<Vec<Vec2>> {
        let mut g = Graph::new(&self.params);
        let out = self.net.forward(&mut g, std::slice::from_ref(seq), &self.stats)?;
        let a = g.value(out.actions);
        Ok((0..a.rows())
            .map(|i| [a.row(i)[0].as_f64(), a.row(i)[1].as_f64()])
            .collect())
    }

    /// Action at the final state token.
    pub fn act(&self, prompt: &PromptSegment, history: &AugmentedHistory) -> Result<Vec2> {
        let prompt = if self.ablation.uses_prompt() {
            prompt.clone()
        } else {
            PromptSegment::empty()
        };
        let seq = assemble(&prompt, history, self.ablation.uses_context())?;
        Ok(*self.predict(&seq)?.last().expect("history has a state token"))
    }
}

/// Start of a prompt window: the world model's choice when `complementary`,
/// otherwise uniform over the same valid range.
pub fn prompt_start<R: Rng>(errors: Option<&[f64]>, len: usize, k: usize, complementary: bool, rng: &mut R) -> usize {
    match errors {
        Some(e) if complementary => select_segment_from_errors(e, k),
        _ if len < k + 1 => 0,
        _ => rng.random_range(0..len - k),
    }
}

/// Draws a demo trajectory and cuts a `k`-step prompt from it. An empty
/// demo set gives an empty prompt.
pub fn get_prompt<R: Rng>(
    demo: &[Trajectory],
    wm: Option<&WorldModel>,
    k: usize,
    complementary: bool,
    rng: &mut R,
) -> Result<PromptSegment> {
    if demo.is_empty() {
        return Ok(PromptSegment::empty());
    }
    let traj = &demo[rng.random_range(0..demo.len())];
    let errors = match (complementary, wm) {
        (true, Some(wm)) => Some(wm.step_errors(traj)?),
        (true, None) => return Err(CoreError::MissingWorldModel),
        _ => None,
    };
    let j = prompt_start(errors.as_deref(), traj.len(), k, complementary, rng);
    Ok(PromptSegment::from_trajectory(traj, j, k))
}

/// Per-task material for training, with world-model outputs precomputed.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub trajectories: Vec<Trajectory>,
    /// `z[i][t]` for trajectory `i` at step `t`; empty without context.
    pub z: Vec<Vec<Vec<f64>>>,
    pub demos: Vec<Trajectory>,
    /// Complementary prompt start per demo; empty unless used.
    pub demo_starts: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub tasks: Vec<TaskData>,
    pub stats: NormalizationStats,
    pub ablation: Ablation,
    pub history_len: usize,
    pub prompt_len: usize,
}

impl TrainingSet {
    /// Precomputes representations and prompt starts with the frozen world
    /// model, which is only consulted when the ablation needs it.
    pub fn new(dataset: &OfflineDataset, wm: Option<&WorldModel>, cfg: &RunConfig) -> Result<Self> {
        let ablation = cfg.ablation;
        let wm = if ablation.needs_world_model() {
            Some(wm.ok_or(CoreError::MissingWorldModel)?)
        } else {
            None
        };
        let mut tasks = Vec::with_capacity(dataset.tasks.len());
        for (task, trajs) in dataset.tasks.iter().zip(&dataset.trajectories) {
            if trajs.is_empty() {
                continue;
            }
            let z = match wm {
                Some(wm) if ablation.uses_context() => {
                    trajs.iter().map(|t| wm.trajectory_z(t)).collect::<Result<_>>()?
                }
                _ => Vec::new(),
            };
            let demos = if ablation.uses_prompt() {
                build_demo(dataset, task.task_id, cfg.demo_top_m)?
            } else {
                Vec::new()
            };
            let demo_starts = match wm {
                Some(wm) if ablation.uses_prompt() && !ablation.no_complementary => demos
                    .iter()
                    .map(|d| Ok(select_segment_from_errors(&wm.step_errors(d)?, cfg.prompt_len)))
                    .collect::<Result<_>>()?,
                _ => Vec::new(),
            };
            tasks.push(TaskData {
                trajectories: trajs.clone(),
                z,
                demos,
                demo_starts,
            });
        }
        if tasks.is_empty() {
            return Err(CoreError::EmptyDataset);
        }
        Ok(Self {
            tasks,
            stats: dataset.stats,
            ablation,
            history_len: cfg.history_len,
            prompt_len: cfg.prompt_len,
        })
    }

    /// One training sequence: a random window of up to `K` steps from a
    /// random trajectory of a random task, plus a prompt from that task.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<TokenSequence> {
        let task = &self.tasks[rng.random_range(0..self.tasks.len())];
        let ti = rng.random_range(0..task.trajectories.len());
        let traj = &task.trajectories[ti];
        let start = rng.random_range(0..traj.len());
        let end = (start + self.history_len).min(traj.len());
        let history = AugmentedHistory {
            steps: (start..end)
                .map(|t| {
                    let st = traj.steps()[t];
                    HistoryStep {
                        z: task.z.get(ti).map(|z| z[t].clone()),
                        rtg: traj.rtg()[t],
                        state: st.s,
                        action: st.a,
                        timestep: t,
                    }
                })
                .collect(),
        };
        let prompt = if self.ablation.uses_prompt() && !task.demos.is_empty() {
            let d = rng.random_range(0..task.demos.len());
            let demo = &task.demos[d];
            let j = if self.ablation.no_complementary {
                prompt_start(None, demo.len(), self.prompt_len, false, rng)
            } else {
                task.demo_starts[d]
            };
            PromptSegment::from_trajectory(demo, j, self.prompt_len)
        } else {
            PromptSegment::empty()
        };
        assemble(&prompt, &history, self.ablation.uses_context())
    }

    pub fn sample_batch<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<TokenSequence>> {
        (0..batch).map(|_| self.sample(rng)).collect()
    }
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
        warmup_steps: cfg.warmup_steps,
        ..AdamConfig::default()
    }
}

/// One optimizer update on `batch`, with dropout masks from `dropout_rng`.
/// Returns the batch loss before the update.
pub fn training_step(
    model: &mut MetaDt,
    batch: &[TokenSequence],
    adam: &AdamConfig,
    dropout_rng: ChaCha8Rng,
) -> Result<f64> {
    let (loss, grads) = {
        let mut g = Graph::training(&model.params, dropout_rng);
        let l = model.net.loss(&mut g, batch, &model.stats)?;
        (g.value(l).item().as_f64(), g.backward(l)?.into_gradients())
    };
    adam_step(&mut model.params, &grads, adam)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdtLossPoint {
    pub step: usize,
    pub action_loss: f64,
}

#[derive(Debug)]
pub struct MdtTraining {
    pub model: MetaDt,
    pub curve: Vec<MdtLossPoint>,
    pub aborted: Option<String>,
}

/// Trains for `cfg.training_steps` updates on the training tasks of `dataset`.
pub fn train_meta_dt(
    dataset: &OfflineDataset,
    wm: Option<&WorldModel>,
    cfg: &RunConfig,
    horizon: usize,
    action_bound: f64,
) -> Result<MdtTraining> {
    let set = TrainingSet::new(dataset, wm, cfg)?;
    let mcfg = MetaDtConfig::from_run(cfg, horizon, action_bound);
    let mut model = MetaDt::new(mcfg, dataset.stats, cfg.ablation, cfg.seed)?;
    let adam = adam_config(cfg);
    let mut rng = stream_rng(cfg.seed, Stream::PolicyBatches);
    let mut curve = Vec::new();
    let mut aborted = None;
    for step in 0..cfg.training_steps {
        let batch = set.sample_batch(cfg.batch_size, &mut rng)?;
        match training_step(
            &mut model,
            &batch,
            &adam,
            sub_rng(cfg.seed, Stream::Dropout, step as u64),
        ) {
            Ok(loss) => {
                if step % cfg.log_every == 0 || step + 1 == cfg.training_steps {
                    curve.push(MdtLossPoint {
                        step,
                        action_loss: loss,
                    });
                }
            }
            Err(CoreError::Nn(e @ NnError::NonFiniteGradient(_))) => {
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(MdtTraining { model, curve, aborted })
}
