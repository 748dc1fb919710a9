//! Parameterised layers built on [`Graph`] operations.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{AttentionLayout, Graph, Var};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = store.add_const(format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.fan_in {
            return shape_err(
                "linear",
                format!("input {:?} into {} features", g.value(x).shape(), self.fan_in),
            );
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Stack of linear layers with ReLU between them (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}

/// Gated recurrent unit cell:
///
/// ```text
/// r  = σ([x, h] W_r + b_r)
/// u  = σ([x, h] W_u + b_u)
/// n  = tanh([x, r ⊙ h] W_n + b_n)
/// h' = (1 − u) ⊙ n + u ⊙ h
/// ```
///
/// `W_r` and `W_u` are stored side by side in one `[in + H, 2H]` matrix.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub gates: Linear,
    pub candidate: Linear,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gates: Linear::new(
                store,
                &format!("{name}.gates"),
                input_dim + hidden_dim,
                2 * hidden_dim,
                rng,
            )?,
            candidate: Linear::new(
                store,
                &format!("{name}.candidate"),
                input_dim + hidden_dim,
                hidden_dim,
                rng,
            )?,
            input_dim,
            hidden_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if g.value(x).cols() != self.input_dim || g.value(h).cols() != hd {
            return shape_err(
                "gru_cell",
                format!(
                    "x {:?}, h {:?} for input {} hidden {hd}",
                    g.value(x).shape(),
                    g.value(h).shape(),
                    self.input_dim
                ),
            );
        }
        let xh = g.concat_cols(&[x, h])?;
        let pre = self.gates.forward(g, xh)?;
        let ru = g.sigmoid(pre);
        let r = g.slice_cols(ru, 0, hd)?;
        let u = g.slice_cols(ru, hd, 2 * hd)?;
        let rh = g.mul(r, h)?;
        let xrh = g.concat_cols(&[x, rh])?;
        let n_pre = self.candidate.forward(g, xrh)?;
        let n = g.tanh(n_pre);
        // (1 − u) n + u h  ==  n + u (h − n)
        let h_minus_n = g.sub(h, n)?;
        let gated = g.mul(u, h_minus_n)?;
        g.add(n, gated)
    }

    /// Runs the cell over `steps` (each `[B, in]`) from a zero state and
    /// returns the final hidden state.
    pub fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, steps: &[Var]) -> Result<Var> {
        let batch = steps.first().map_or(0, |&s| g.value(s).rows());
        let mut h = g.input(crate::Tensor::zeros(&[batch, self.hidden_dim]));
        for &x in steps {
            h = self.forward(g, x, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add_const(format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.add_const(format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, Self::EPS)
    }
}

/// Lookup table `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            table: store.add_normal(format!("{name}.table"), &[vocab, dim], 0.02, rng)?,
            vocab,
            dim,
        })
    }

    /// Rows of the table; `None` yields a zero row.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &[Option<usize>]) -> Result<Var> {
        if let Some(bad) = ids.iter().flatten().find(|&&i| i >= self.vocab) {
            return shape_err("embedding", format!("index {bad} >= vocab {}", self.vocab));
        }
        let t = g.param(self.table);
        g.gather_rows(t, ids.to_vec())
    }
}

/// Multi-head causal self-attention with a fused `[D, 3D]` projection.
#[derive(Debug, Clone)]
pub struct CausalSelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl CausalSelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return shape_err("attention", format!("dim {dim} with {heads} heads"));
        }
        Ok(Self {
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` holds `batch` sequences of `seq` tokens as consecutive rows.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        seq: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let qkv = self.qkv.forward(g, x)?;
        let layout = AttentionLayout {
            batch,
            seq,
            heads: self.heads,
            key_valid,
        };
        let y = g.causal_attention(qkv, &layout)?;
        self.proj.forward(g, y)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))` with
/// a ReLU feed-forward of width `4D`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln_attn: LayerNorm,
    pub attn: CausalSelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub dropout: f64,
}

impl TransformerBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: CausalSelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), &[dim, 4 * dim, dim], rng)?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        batch: usize,
        seq: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let a = self.ln_attn.forward(g, x)?;
        let a = self.attn.forward(g, a, batch, seq, key_valid)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let f = self.ln_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, f)?;
        let f = g.dropout(f, self.dropout);
        g.add(x, f)
    }
}
