//! Context-aware world model: a GRU encoder that maps a short history to a
//! task representation `z`, and reward/transition decoders conditioned on it.

use metadt_nn::{adam_step, AdamConfig, Graph, GruCell, Mlp, NnError, ParameterStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{stats_of_states, NormalizationStats, OfflineDataset, Trajectory, Transition, Vec2};
use crate::error::{CoreError, Result};
use crate::rng::{stream_rng, Stream};

/// Width of one encoder token: normalized state, action, reward.
pub const TOKEN_DIM: usize = 5;

/// The `h` steps before `t` (oldest first, `None` where the episode had not
/// started yet) and the state at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub triples: Vec<Option<(Vec2, Vec2, f64)>>,
    pub state: Vec2,
}

impl ContextWindow {
    /// Context at timestep `steps.len()` of an episode whose transitions so
    /// far are `steps` and whose current state is `state`.
    pub fn from_history(steps: &[Transition], state: Vec2, h: usize) -> Self {
        let t = steps.len();
        let start = t.saturating_sub(h);
        let mut triples = vec![None; h - (t - start)];
        triples.extend(steps[start..].iter().map(|st| Some((st.s, st.a, st.r))));
        Self { triples, state }
    }

    pub fn h(&self) -> usize {
        self.triples.len()
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.triples.iter().map(Option::is_none).collect()
    }

    /// The `h + 1` encoder tokens; padding is all zeros and the final token
    /// carries only the state.
    pub fn tokens(&self, stats: &NormalizationStats) -> Vec<[f64; TOKEN_DIM]> {
        let mut out: Vec<[f64; TOKEN_DIM]> = self
            .triples
            .iter()
            .map(|tr| match tr {
                Some((s, a, r)) => {
                    let n = stats.normalize(*s);
                    [n[0], n[1], a[0], a[1], *r]
                }
                None => [0.0; TOKEN_DIM],
            })
            .collect();
        let n = stats.normalize(self.state);
        out.push([n[0], n[1], 0.0, 0.0, 0.0]);
        out
    }
}

/// History window for step `t` of a stored trajectory.
pub fn build_context(traj: &Trajectory, t: usize, h: usize) -> Result<ContextWindow> {
    if t >= traj.len() {
        return Err(CoreError::Index {
            index: t,
            len: traj.len(),
        });
    }
    Ok(ContextWindow::from_history(&traj.steps()[..t], traj.steps()[t].s, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub h: usize,
    pub hidden: usize,
    pub z_dim: usize,
    pub decoder_hidden: usize,
}

impl WorldModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            h: cfg.h,
            hidden: cfg.wm_hidden,
            z_dim: cfg.z_dim,
            decoder_hidden: cfg.wm_hidden,
        }
    }
}

/// Layer layout of the world model; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct WorldModelNet {
    pub config: WorldModelConfig,
    pub gru: GruCell,
    pub encoder_head: Mlp,
    pub reward: Mlp,
    pub transition: Mlp,
}

impl WorldModelNet {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        config: WorldModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (hd, z, dh) = (config.hidden, config.z_dim, config.decoder_hidden);
        Ok(Self {
            config,
            gru: GruCell::new(store, "wm.encoder.gru", TOKEN_DIM, hd, rng)?,
            encoder_head: Mlp::new(store, "wm.encoder.head", &[hd, hd, z], rng)?,
            reward: Mlp::new(store, "wm.reward", &[4 + z, dh, dh, 1], rng)?,
            transition: Mlp::new(store, "wm.transition", &[4 + z, dh, dh, 2], rng)?,
        })
    }

    /// `[B, z_dim]` representations for a batch of contexts.
    pub fn encode_graph<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        contexts: &[ContextWindow],
        stats: &NormalizationStats,
    ) -> Result<Var> {
        if contexts.is_empty() {
            return Err(CoreError::EmptyBatch);
        }
        let h = self.config.h;
        if let Some(c) = contexts.iter().find(|c| c.h() != h) {
            return Err(CoreError::InvalidConfig(format!(
                "context of {} steps, encoder expects {h}",
                c.h()
            )));
        }
        let tokens: Vec<Vec<[f64; TOKEN_DIM]>> = contexts.iter().map(|c| c.tokens(stats)).collect();
        let steps: Vec<Var> = (0..=h)
            .map(|i| {
                let flat: Vec<f64> = tokens.iter().flat_map(|t| t[i]).collect();
                Ok(g.input(Tensor::from_f64(&[contexts.len(), TOKEN_DIM], &flat)?))
            })
            .collect::<Result<_>>()?;
        let last = self.gru.run(g, &steps)?;
        Ok(self.encoder_head.forward(g, last)?)
    }

    /// Reward `[B, 1]` and next state `[B, 2]` from normalized states, actions
    /// and representations.
    pub fn decode_graph<T: Scalar>(&self, g: &mut Graph<'_, T>, s_norm: Var, a: Var, z: Var) -> Result<(Var, Var)> {
        let x = g.concat_cols(&[s_norm, a, z])?;
        let r = self.reward.forward(g, x)?;
        let s = self.transition.forward(g, x)?;
        Ok((r, s))
    }

    /// Sets the output biases of both decoders.
    pub fn set_output_bias<T: Scalar>(&self, store: &mut ParameterStore<T>, reward: f64, next_state: Vec2) {
        let rb = self.reward.layers.last().expect("non-empty").bias;
        let sb = self.transition.layers.last().expect("non-empty").bias;
        store.get_mut(rb).data_mut()[0] = T::from_f64(reward);
        let s = store.get_mut(sb).data_mut();
        s[0] = T::from_f64(next_state[0]);
        s[1] = T::from_f64(next_state[1]);
    }
}

/// One world-model training example.
#[derive(Debug, Clone)]
pub struct WmSample {
    pub context: ContextWindow,
    pub s: Vec2,
    pub a: Vec2,
    pub r: f64,
    pub s_next: Vec2,
}

impl WmSample {
    pub fn from_trajectory(traj: &Trajectory, t: usize, h: usize) -> Result<Self> {
        let context = build_context(traj, t, h)?;
        let st = traj.steps()[t];
        Ok(Self {
            context,
            s: st.s,
            a: st.a,
            r: st.r,
            s_next: st.s_next,
        })
    }
}

/// `Σ_b (r − r̂)² + ‖s' − ŝ'‖²` divided by the batch size, split into its
/// reward and state parts.
pub fn wm_loss(r_hat: &[f64], s_hat: &[Vec2], r: &[f64], s_next: &[Vec2]) -> Result<(f64, f64)> {
    let b = r.len();
    if b == 0 {
        return Err(CoreError::EmptyBatch);
    }
    if r_hat.len() != b || s_hat.len() != b || s_next.len() != b {
        return Err(CoreError::InvalidConfig("wm_loss inputs differ in length".into()));
    }
    let lr: f64 = r_hat.iter().zip(r).map(|(p, t)| (t - p).powi(2)).sum();
    let ls: f64 = s_hat
        .iter()
        .zip(s_next)
        .map(|(p, t)| (t[0] - p[0]).powi(2) + (t[1] - p[1]).powi(2))
        .sum();
    Ok((lr / b as f64, ls / b as f64))
}

/// Graph nodes for the training loss of a batch: `(total, reward, state)`.
pub fn wm_loss_graph<T: Scalar>(
    net: &WorldModelNet,
    g: &mut Graph<'_, T>,
    batch: &[WmSample],
    stats: &NormalizationStats,
) -> Result<(Var, Var, Var)> {
    let b = batch.len();
    let contexts: Vec<ContextWindow> = batch.iter().map(|x| x.context.clone()).collect();
    let z = net.encode_graph(g, &contexts, stats)?;
    let s: Vec<f64> = batch.iter().flat_map(|x| stats.normalize(x.s)).collect();
    let a: Vec<f64> = batch.iter().flat_map(|x| x.a).collect();
    let sv = g.input(Tensor::from_f64(&[b, 2], &s)?);
    let av = g.input(Tensor::from_f64(&[b, 2], &a)?);
    let (r_hat, s_hat) = net.decode_graph(g, sv, av, z)?;
    let r: Vec<f64> = batch.iter().map(|x| x.r).collect();
    let sn: Vec<f64> = batch.iter().flat_map(|x| x.s_next).collect();
    let lr = g.squared_error(r_hat, Tensor::from_f64(&[b, 1], &r)?, b as f64)?;
    let ls = g.squared_error(s_hat, Tensor::from_f64(&[b, 2], &sn)?, b as f64)?;
    let total = g.add(lr, ls)?;
    Ok((total, lr, ls))
}

/// A trained world model with the normalization it was trained under.
#[derive(Debug, Clone)]
pub struct WorldModel {
    pub net: WorldModelNet,
    pub params: ParameterStore<f32>,
    pub stats: NormalizationStats,
}

impl WorldModel {
    pub fn new(config: WorldModelConfig, stats: NormalizationStats, seed: u64) -> Result<Self> {
        let mut params = ParameterStore::new();
        let mut rng = stream_rng(seed, Stream::WorldModelInit);
        let net = WorldModelNet::new(&mut params, config, &mut rng)?;
        Ok(Self { net, params, stats })
    }

    /// Rebuilds the layer layout around loaded parameters.
    pub fn from_params(
        config: WorldModelConfig,
        stats: NormalizationStats,
        params: ParameterStore<f32>,
    ) -> Result<Self> {
        let mut fresh = Self::new(config, stats, 0)?;
        fresh.params.load_values_from(&params)?;
        Ok(fresh)
    }

    pub fn config(&self) -> WorldModelConfig {
        self.net.config
    }

    pub fn encode(&self, ctx: &ContextWindow) -> Result<Vec<f64>> {
        Ok(self.encode_batch(std::slice::from_ref(ctx))?.remove(0))
    }

    pub fn encode_batch(&self, contexts: &[ContextWindow]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.params);
        let z = self.net.encode_graph(&mut g, contexts, &self.stats)?;
        let zt = g.value(z);
        Ok((0..zt.rows())
            .map(|i| zt.row(i).iter().map(|x| x.as_f64()).collect())
            .collect())
    }

    pub fn predict(&self, s: Vec2, a: Vec2, z: &[f64]) -> Result<(f64, Vec2)> {
        Ok(self.predict_batch(&[(s, a)], &[z.to_vec()])?.remove(0))
    }

    pub fn predict_batch(&self, sa: &[(Vec2, Vec2)], z: &[Vec<f64>]) -> Result<Vec<(f64, Vec2)>> {
        let b = sa.len();
        if b == 0 {
            return Err(CoreError::EmptyBatch);
        }
        let zd = self.net.config.z_dim;
        let mut g = Graph::new(&self.params);
        let s: Vec<f64> = sa.iter().flat_map(|(s, _)| self.stats.normalize(*s)).collect();
        let a: Vec<f64> = sa.iter().flat_map(|(_, a)| *a).collect();
        let zf: Vec<f64> = z.iter().flatten().copied().collect();
        let sv = g.input(Tensor::from_f64(&[b, 2], &s)?);
        let av = g.input(Tensor::from_f64(&[b, 2], &a)?);
        let zv = g.input(Tensor::from_f64(&[b, zd], &zf)?);
        let (r, sn) = self.net.decode_graph(&mut g, sv, av, zv)?;
        let (r, sn) = (g.value(r), g.value(sn));
        Ok((0..b)
            .map(|i| (r.data()[i].as_f64(), [sn.row(i)[0].as_f64(), sn.row(i)[1].as_f64()]))
            .collect())
    }

    /// Representation at every timestep of `traj`, each from its own window.
    pub fn trajectory_z(&self, traj: &Trajectory) -> Result<Vec<Vec<f64>>> {
        let h = self.net.config.h;
        let contexts = (0..traj.len())
            .map(|t| build_context(traj, t, h))
            .collect::<Result<Vec<_>>>()?;
        self.encode_batch(&contexts)
    }

    /// Per-step prediction error `(r − r̂)² + ‖s' − ŝ'‖²` along `traj`.
    pub fn step_errors(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let z = self.trajectory_z(traj)?;
        let sa: Vec<(Vec2, Vec2)> = traj.steps().iter().map(|s| (s.s, s.a)).collect();
        let preds = self.predict_batch(&sa, &z)?;
        Ok(traj
            .steps()
            .iter()
            .zip(preds)
            .map(|(st, (r, s))| (st.r - r).powi(2) + (st.s_next[0] - s[0]).powi(2) + (st.s_next[1] - s[1]).powi(2))
            .collect())
    }

    pub fn segment_error(&self, traj: &Trajectory, j: usize, k: usize) -> Result<f64> {
        if j + k >= traj.len() {
            return Err(CoreError::Index {
                index: j + k,
                len: traj.len(),
            });
        }
        window_error(&self.step_errors(traj)?, j, k)
    }

    pub fn select_segment(&self, traj: &Trajectory, k: usize) -> Result<usize> {
        Ok(select_segment_from_errors(&self.step_errors(traj)?, k))
    }
}

/// Sum of `errors[j..=j + k]`.
pub fn window_error(errors: &[f64], j: usize, k: usize) -> Result<f64> {
    if j + k >= errors.len() {
        return Err(CoreError::Index {
            index: j + k,
            len: errors.len(),
        });
    }
    Ok(errors[j..=j + k].iter().sum())
}

/// Start of the window `[j, j + k]` with the largest summed error; the
/// first such `j` on ties, and 0 when the trajectory has fewer than `k + 1`
/// steps.
pub fn select_segment_from_errors(errors: &[f64], k: usize) -> usize {
    if errors.len() < k + 1 {
        return 0;
    }
    let mut best = 0;
    let mut best_err = f64::NEG_INFINITY;
    for j in 0..errors.len() - k {
        let e: f64 = errors[j..=j + k].iter().sum();
        if e > best_err {
            best = j;
            best_err = e;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WmLossPoint {
    pub step: usize,
    pub loss: f64,
    pub loss_reward: f64,
    pub loss_state: f64,
}

#[derive(Debug)]
pub struct WmTraining {
    pub model: WorldModel,
    pub curve: Vec<WmLossPoint>,
    /// Set when training stopped early on a non-finite gradient.
    pub aborted: Option<String>,
}

fn sample_batch<R: Rng>(pool: &[&[Trajectory]], batch: usize, h: usize, rng: &mut R) -> Result<Vec<WmSample>> {
    (0..batch)
        .map(|_| {
            let trajs = pool[rng.random_range(0..pool.len())];
            let traj = &trajs[rng.random_range(0..trajs.len())];
            let t = rng.random_range(0..traj.len());
            WmSample::from_trajectory(traj, t, h)
        })
        .collect()
}

/// Trains on every task of `datasets`: each update draws `wm_batch_size`
/// (task, trajectory, timestep) triples uniformly. Decoder output biases
/// start at the mean reward and mean next state.
pub fn train_world_model(datasets: &[&OfflineDataset], cfg: &RunConfig) -> Result<WmTraining> {
    let pool: Vec<&[Trajectory]> = datasets
        .iter()
        .flat_map(|d| d.trajectories.iter().map(Vec::as_slice))
        .filter(|t| !t.is_empty())
        .collect();
    if pool.is_empty() {
        return Err(CoreError::EmptyDataset);
    }
    let transitions: Vec<&Transition> = pool.iter().flat_map(|t| t.iter()).flat_map(|t| t.steps()).collect();
    let states: Vec<Vec2> = transitions.iter().map(|t| t.s).collect();
    let stats = stats_of_states(states.iter())?;
    let n = transitions.len() as f64;
    let mean_r = transitions.iter().map(|t| t.r).sum::<f64>() / n;
    let mean_s = [
        transitions.iter().map(|t| t.s_next[0]).sum::<f64>() / n,
        transitions.iter().map(|t| t.s_next[1]).sum::<f64>() / n,
    ];

    let wcfg = WorldModelConfig::from_run(cfg);
    let mut model = WorldModel::new(wcfg, stats, cfg.seed)?;
    model.net.set_output_bias(&mut model.params, mean_r, mean_s);
    let adam = AdamConfig {
        lr: cfg.wm_lr,
        weight_decay: cfg.weight_decay,
        grad_clip: cfg.grad_clip,
        warmup_steps: cfg.wm_warmup_steps,
        ..AdamConfig::default()
    };
    let mut rng = stream_rng(cfg.seed, Stream::WorldModelBatches);
    let mut curve = Vec::new();
    let mut aborted = None;
    for step in 0..cfg.wm_steps {
        let batch = sample_batch(&pool, cfg.wm_batch_size, wcfg.h, &mut rng)?;
        let grads = {
            let mut g = Graph::new(&model.params);
            let (total, lr, ls) = wm_loss_graph(&model.net, &mut g, &batch, &model.stats)?;
            if step % cfg.log_every == 0 || step + 1 == cfg.wm_steps {
                curve.push(WmLossPoint {
                    step,
                    loss: g.value(total).item().as_f64(),
                    loss_reward: g.value(lr).item().as_f64(),
                    loss_state: g.value(ls).item().as_f64(),
                });
            }
            g.backward(total)?.into_gradients()
        };
        match adam_step(&mut model.params, &grads, &adam) {
            Ok(_) => {}
            Err(e @ NnError::NonFiniteGradient(_)) => {
                aborted = Some(format!("step {step}: {e}"));
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(WmTraining { model, curve, aborted })
}
