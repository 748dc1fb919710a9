//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParameterStore`] and appear as leaves; calling
//! [`Graph::backward`] on a scalar loss walks the tape in reverse and
//! accumulates gradients for every node that depends on a parameter or on a
//! leaf created with [`Graph::leaf`].

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NnError, Result};
use crate::params::{Gradients, ParamId, ParameterStore};
use crate::scalar::{axpy, dot, Scalar};
use crate::tensor::{gemm_into, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout(Var, Vec<T>),
    SquaredError {
        pred: Var,
        target: Tensor<T>,
        divisor: T,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Layout of a batch of causal attention sequences: `batch` sequences of
/// `seq` tokens each, stored as consecutive rows. `key_valid[row]` false marks
/// padding that no other token may attend to.
#[derive(Debug, Clone)]
pub struct AttentionLayout<'m> {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_valid: Option<&'m [bool]>,
}

pub struct Graph<'a, T: Scalar> {
    store: &'a ParameterStore<T>,
    nodes: Vec<Node<'a, T>>,
    param_vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Inference graph: dropout is the identity.
    pub fn new(store: &'a ParameterStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            rng: None,
        }
    }

    /// Training graph: dropout masks are drawn from `rng`.
    pub fn training(store: &'a ParameterStore<T>, rng: ChaCha8Rng) -> Self {
        let mut g = Self::new(store);
        g.rng = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn store(&self) -> &'a ParameterStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is tracked (used for gradient checks).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Input,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.get(id)),
            op: Op::Param,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() || tb.shape().len() != 2 {
            return shape_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let mut out = Tensor::zeros(&[ta.rows(), tb.cols()]);
        gemm_into(ta, false, tb, false, &mut out, false);
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Adds a `[N]` bias to every row of an `[M, N]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.cols() != tb.len() {
            return shape_err("add_bias", format!("{:?} + {:?}", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        let n = tb.len();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(tb.data()) {
                *o = *o + bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return shape_err("concat_cols", "row counts differ");
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if start >= end || end > tx.cols() {
            return shape_err("slice_cols", format!("{start}..{end} of {:?}", tx.shape()));
        }
        let rows = tx.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let out = Tensor::new(&[rows, end - start], data)?;
        Ok(self.push(out, Op::SliceCols(x, start), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        if parts.iter().any(|&p| self.value(p).cols() != cols) {
            return shape_err("concat_rows", "column counts differ");
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let out = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Builds a matrix whose row `r` is row `idx[r]` of `x`, or zeros for
    /// `None`. Serves both embedding lookup and token interleaving.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let rows = tx.rows();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            match i {
                Some(i) if i < rows => data.extend_from_slice(tx.row(i)),
                Some(i) => return shape_err("gather_rows", format!("row {i} of {rows}")),
                None => data.extend(std::iter::repeat_n(T::zero(), cols)),
            }
        }
        let out = Tensor::new(&[idx.len(), cols], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx), &[x]))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of width N.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return shape_err("layer_norm", format!("{:?} with gain {:?}", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(eps);
        let mut out = Tensor::zeros(&[rows, n]);
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let xr = tx.row(r);
            let mean = xr.iter().fold(T::zero(), |a, &b| a + b) / nf;
            let var = xr.iter().fold(T::zero(), |a, &b| a + (b - mean) * (b - mean)) / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let o = out.row_mut(r);
            for c in 0..n {
                let h = (xr[c] - mean) * rs;
                xhat[r * n + c] = h;
                o[c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Causal scaled dot-product attention over packed `[q | k | v]` rows.
    ///
    /// Query `i` attends to key `j` iff `j <= i` within its own sequence and
    /// key `j` is valid; a token always attends to itself so padded rows stay
    /// well defined.
    #[allow(clippy::needless_range_loop)]
    pub fn causal_attention(&mut self, qkv: Var, layout: &AttentionLayout<'_>) -> Result<Var> {
        let t = self.value(qkv);
        let (batch, seq, heads) = (layout.batch, layout.seq, layout.heads);
        if t.rows() != batch * seq || !t.cols().is_multiple_of(3) {
            return shape_err(
                "causal_attention",
                format!("{:?} for batch {batch} x seq {seq}", t.shape()),
            );
        }
        let d = t.cols() / 3;
        if heads == 0 || !d.is_multiple_of(heads) {
            return shape_err("causal_attention", format!("{d} not divisible by {heads} heads"));
        }
        if let Some(m) = layout.key_valid {
            if m.len() != batch * seq {
                return shape_err("causal_attention", "key mask length");
            }
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::zeros(&[batch * seq, d]);
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for hd in 0..heads {
                let qo = hd * dh;
                let ko = d + hd * dh;
                let vo = 2 * d + hd * dh;
                for i in 0..seq {
                    let qi = &t.row(b * seq + i)[qo..qo + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        if !allowed(layout.key_valid, b * seq, i, j) {
                            continue;
                        }
                        let kj = &t.row(b * seq + j)[ko..ko + dh];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let p = &mut probs[((b * heads + hd) * seq + i) * seq..][..seq];
                    let mut z = T::zero();
                    for j in 0..=i {
                        if allowed(layout.key_valid, b * seq, i, j) {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            z = z + e;
                        }
                    }
                    let out_row = &mut out.row_mut(b * seq + i)[qo..qo + dh];
                    for j in 0..=i {
                        if p[j] != T::zero() {
                            p[j] = p[j] / z;
                            let vj = &t.row(b * seq + j)[vo..vo + dh];
                            axpy(p[j], vj, out_row);
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Row attention weights `[batch, heads, seq, seq]` recorded by an
    /// attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Inverted dropout. Identity for inference graphs or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.nodes[x.0].value.len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(tx.shape(), data).expect("same shape");
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    /// `Σ (pred − target)² / divisor`, a `[1]` tensor.
    pub fn squared_error(&mut self, pred: Var, target: Tensor<T>, divisor: f64) -> Result<Var> {
        let tp = self.value(pred);
        if tp.len() != target.len() {
            return shape_err(
                "squared_error",
                format!("{:?} vs target {:?}", tp.shape(), target.shape()),
            );
        }
        let divisor = T::from_f64(divisor);
        let s = tp
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |a, (&p, &t)| a + (p - t) * (p - t));
        let out = Tensor::scalar(s / divisor);
        Ok(self.push(out, Op::SquaredError { pred, target, divisor }, &[pred]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let n = target.len().max(1) as f64;
        self.squared_error(pred, target, n)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        Ok(Backward {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn propagate(&self, node: &Node<'a, T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    let (g, acc) = slot(grads, *a, ta.shape());
                    gemm_into(dy, false, tb, true, g, acc);
                }
                if needs(b) {
                    let (g, acc) = slot(grads, *b, tb.shape());
                    gemm_into(ta, true, dy, false, g, acc);
                }
            }
            Op::AddBias(x, b) => {
                if needs(x) {
                    accumulate(grads, *x, dy);
                }
                if needs(b) {
                    let n = self.value(*b).len();
                    let mut gb = Tensor::zeros(self.value(*b).shape());
                    for row in dy.data().chunks(n) {
                        for (g, &d) in gb.data_mut().iter_mut().zip(row) {
                            *g = *g + d;
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, dy);
                }
                if needs(b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, *a, dy);
                }
                if needs(b) {
                    accumulate(grads, *b, &dy.map(|d| -d));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    accumulate(grads, *a, &elementwise(dy, tb, |d, y| d * y));
                }
                if needs(b) {
                    accumulate(grads, *b, &elementwise(dy, ta, |d, x| d * x));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, &dy.map(|d| d * c));
            }
            Op::Relu(x) => {
                let g = elementwise(dy, &node.value, |d, y| if y > T::zero() { d } else { T::zero() });
                accumulate(grads, *x, &g);
            }
            Op::Sigmoid(x) => {
                let g = elementwise(dy, &node.value, |d, y| d * y * (T::one() - y));
                accumulate(grads, *x, &g);
            }
            Op::Tanh(x) => {
                let g = elementwise(dy, &node.value, |d, y| d * (T::one() - y * y));
                accumulate(grads, *x, &g);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(p) {
                        let rows = dy.rows();
                        let mut g = Tensor::zeros(self.value(*p).shape());
                        for r in 0..rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        accumulate(grads, *p, &g);
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let (g, _) = slot(grads, *x, tx.shape());
                let w = dy.cols();
                for r in 0..dy.rows() {
                    let dst = &mut g.row_mut(r)[*start..*start + w];
                    for (a, &d) in dst.iter_mut().zip(dy.row(r)) {
                        *a = *a + d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let n = tp.len();
                    if needs(p) {
                        let g = Tensor::new(tp.shape(), dy.data()[offset..offset + n].to_vec()).expect("same size");
                        accumulate(grads, *p, &g);
                    }
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let tx = self.value(*x);
                let (g, _) = slot(grads, *x, tx.shape());
                for (r, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        let src = dy.row(r);
                        for (a, &d) in g.row_mut(*i).iter_mut().zip(src) {
                            *a = *a + d;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gamma);
                let n = tg.len();
                let rows = dy.rows();
                let nf = T::from_f64(n as f64);
                if needs(gamma) || needs(beta) {
                    let mut gg = Tensor::zeros(tg.shape());
                    let mut gb = Tensor::zeros(tg.shape());
                    for r in 0..rows {
                        let d = dy.row(r);
                        for c in 0..n {
                            gg.data_mut()[c] = gg.data()[c] + d[c] * xhat[r * n + c];
                            gb.data_mut()[c] = gb.data()[c] + d[c];
                        }
                    }
                    if needs(gamma) {
                        accumulate(grads, *gamma, &gg);
                    }
                    if needs(beta) {
                        accumulate(grads, *beta, &gb);
                    }
                }
                if needs(x) {
                    let mut gx = Tensor::zeros(dy.shape());
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let d = dy.row(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            dxhat[c] = d[c] * tg.data()[c];
                            mean_d = mean_d + dxhat[c];
                            mean_dx = mean_dx + dxhat[c] * xh[c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        let out = gx.row_mut(r);
                        for c in 0..n {
                            out[c] = rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let t = self.value(*qkv);
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let d = t.cols() / 3;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (g, _) = slot(grads, *qkv, t.shape());
                let width = 3 * d;
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for hd in 0..heads {
                        let qo = hd * dh;
                        let ko = d + hd * dh;
                        let vo = 2 * d + hd * dh;
                        for i in 0..seq {
                            let p = &probs[((b * heads + hd) * seq + i) * seq..][..seq];
                            let dyi = &dy.row(b * seq + i)[qo..qo + dh];
                            let mut sum = T::zero();
                            for j in 0..=i {
                                if p[j] != T::zero() {
                                    let vj = &t.row(b * seq + j)[vo..vo + dh];
                                    dp[j] = dot(dyi, vj);
                                    sum = sum + p[j] * dp[j];
                                }
                            }
                            let row_i = (b * seq + i) * width;
                            for j in 0..=i {
                                if p[j] == T::zero() {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - sum) * scale;
                                let row_j = (b * seq + j) * width;
                                let kj = &t.row(b * seq + j)[ko..ko + dh];
                                let qi = &t.row(b * seq + i)[qo..qo + dh];
                                let gd = g.data_mut();
                                axpy(ds, kj, &mut gd[row_i + qo..row_i + qo + dh]);
                                axpy(ds, qi, &mut gd[row_j + ko..row_j + ko + dh]);
                                axpy(p[j], dyi, &mut gd[row_j + vo..row_j + vo + dh]);
                            }
                        }
                    }
                }
            }
            Op::Dropout(x, mask) => {
                let data = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                accumulate(grads, *x, &Tensor::new(dy.shape(), data).expect("same shape"));
            }
            Op::SquaredError { pred, target, divisor } => {
                let tp = self.value(*pred);
                let c = dy.item() * T::from_f64(2.0) / *divisor;
                let data = tp
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| c * (p - t))
                    .collect();
                accumulate(grads, *pred, &Tensor::new(tp.shape(), data).expect("same shape"));
            }
        }
    }
}

fn allowed(valid: Option<&[bool]>, base: usize, i: usize, j: usize) -> bool {
    j == i || valid.is_none_or(|m| m[base + j])
}

fn elementwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Gradient buffer for `v`, plus whether it already held a value (so that
/// a gemm should accumulate rather than overwrite).
fn slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> (&'g mut Tensor<T>, bool) {
    let existed = grads[v.0].is_some();
    let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    (g, existed)
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: &Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

/// Result of a reverse pass.
pub struct Backward<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Backward<T> {
    /// Gradient of the loss with respect to any node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn into_gradients(mut self) -> Gradients<T> {
        let grads = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| self.grads[v.0].take()))
            .collect();
        Gradients { grads }
    }
}
