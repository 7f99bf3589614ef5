//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op of one forward pass. [`Tape::backward`] walks
//! the record once in reverse, accumulating gradients into each op's inputs.
//! Parameters enter the tape by reference through [`ParamRef`]; frozen
//! parameters never receive gradients themselves, but gradients still flow
//! through the ops that consume them.

use std::collections::HashMap;
use std::ops::Deref;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{gemm, View, ViewMut};
use super::ops::{gelu_grad_scalar, gelu_scalar, sigmoid_scalar};
use super::{NumericsError, ParamSet, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reference to a tensor in one of the tape's parameter sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRef {
    Trainable(usize),
    Frozen(usize),
}

/// Grouping of rows into independent attention blocks.
///
/// Queries are split into blocks of `q_block` rows and keys/values into
/// blocks of `kv_block` rows; block `g` of the queries attends only to block
/// `g` of the keys. Full self-attention is a single block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub heads: usize,
    pub q_block: usize,
    pub kv_block: usize,
}

/// One logged attention application.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionRecord {
    pub stage: &'static str,
    pub blocks: usize,
    pub heads: usize,
    pub q_block: usize,
    pub kv_block: usize,
}

impl AttentionRecord {
    /// Score-matrix entries of a single head.
    pub fn entries_per_head(&self) -> usize {
        self.blocks * self.q_block * self.kv_block
    }
}

enum Val<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Deref for Val<'_> {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Val::Owned(t) => t,
            Val::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    ScatterAddRows { base: Var, src: Var, idx: Vec<Option<usize>> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    RepeatRows(Var),
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<f64> },
    MaskMul { x: Var, mask: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, observed: usize },
    Sum(Var),
}

struct Node<'p> {
    value: Val<'p>,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    trainable: Option<&'p ParamSet>,
    frozen: Option<&'p ParamSet>,
    param_vars: HashMap<ParamRef, Var>,
    dropout_rng: Option<ChaCha8Rng>,
    attention_log: Vec<AttentionRecord>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    trainable_vars: Vec<(usize, Var)>,
    trainable_len: usize,
    visits: usize,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value, if any flowed.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Number of ops whose backward rule ran.
    pub fn visits(&self) -> usize {
        self.visits
    }

    /// Gradients aligned with the trainable [`ParamSet`]; `None` where the
    /// parameter was not used.
    pub fn into_trainable(mut self) -> Vec<Option<Tensor>> {
        let mut out = vec![None; self.trainable_len];
        for (idx, var) in self.trainable_vars {
            out[idx] = self.grads[var.0].take();
        }
        out
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.shape().len() == 2 {
        Ok(())
    } else {
        Err(NumericsError::ShapeMismatch { op, left: t.shape().to_vec(), right: vec![] })
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// Tape with no parameter sets, for standalone computations.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            trainable: None,
            frozen: None,
            param_vars: HashMap::new(),
            dropout_rng: None,
            attention_log: Vec::new(),
        }
    }

    pub fn with_params(trainable: &'p ParamSet, frozen: &'p ParamSet) -> Self {
        Self { trainable: Some(trainable), frozen: Some(frozen), ..Self::new() }
    }

    /// Enables dropout (training mode) driven by the given generator.
    pub fn enable_dropout(&mut self, rng: ChaCha8Rng) {
        self.dropout_rng = Some(rng);
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn attention_log(&self) -> &[AttentionRecord] {
        &self.attention_log
    }

    fn push(&mut self, value: Val<'p>, op: Op, needs_grad: bool) -> Result<Var, NumericsError> {
        #[cfg(debug_assertions)]
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: op_name(&op), index });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NumericsError> {
        self.push(Val::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Result<Var, NumericsError> {
        self.push(Val::Borrowed(t), Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be queried after backward.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var, NumericsError> {
        self.push(Val::Owned(t), Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated requests return the same var.
    pub fn param(&mut self, p: ParamRef) -> Var {
        if let Some(&v) = self.param_vars.get(&p) {
            return v;
        }
        let (set, idx, trainable) = match p {
            ParamRef::Trainable(i) => (self.trainable, i, true),
            ParamRef::Frozen(i) => (self.frozen, i, false),
        };
        let set = set.expect("tape has no parameter set for this reference");
        let t = set.get(idx);
        self.nodes.push(Node { value: Val::Borrowed(t), op: Op::Leaf, needs_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(p, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(1.0, View::dense(ta.data(), m, k), View::dense(tb.data(), k, n), 0.0, ViewMut::dense(&mut out, m, n));
        let ng = self.needs(a) || self.needs(b);
        self.push(Val::Owned(Tensor::from_parts(vec![m, n], out)), Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        require_matrix("transpose", t)?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let ng = self.needs(a);
        self.push(Val::Owned(Tensor::from_parts(vec![n, m], out)), Op::Transpose(a), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Add(a, b), ng)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let ng = self.needs(a) || self.needs(b);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Scale(a, c), ng)
    }

    /// Adds a row vector (`[n]` or `[1 x n]`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.len() != tx.cols() {
            return Err(shape_err("add_row", tx, tr));
        }
        let c = tx.cols();
        let out: Vec<f64> = tx.data().iter().enumerate().map(|(i, v)| v + tr.data()[i % c]).collect();
        let shape = tx.shape().to_vec();
        let ng = self.needs(x) || self.needs(row);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::AddRow(x, row), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Sigmoid(x), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(t.cols()) {
            super::ops::softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::SoftmaxRows(x), ng)
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = tx.cols();
        if tg.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.len() != d {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            Val::Owned(Tensor::from_parts(shape, out)),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            ng,
        )
    }

    /// Selects rows of a `[V x d]` table.
    pub fn gather_rows(&mut self, table: Var, idx: Vec<usize>) -> Result<Var, NumericsError> {
        let t = self.value(table);
        require_matrix("gather_rows", t)?;
        let (v, d) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(NumericsError::EmptyInput("gather_rows"));
        }
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= v {
                return Err(NumericsError::IndexOutOfRange { op: "gather_rows", index: i, bound: v });
            }
            out.extend_from_slice(t.row_slice(i));
        }
        let n = idx.len();
        let ng = self.needs(table);
        self.push(Val::Owned(Tensor::from_parts(vec![n, d], out)), Op::GatherRows { table, idx }, ng)
    }

    /// `out[r] = base[r] + src[idx[r]]`, leaving rows with `None` untouched
    /// (bit-for-bit copies of `base`).
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: Vec<Option<usize>>) -> Result<Var, NumericsError> {
        let (tb, ts) = (self.value(base), self.value(src));
        require_matrix("scatter_add_rows", tb)?;
        if tb.cols() != ts.cols() || idx.len() != tb.rows() {
            return Err(shape_err("scatter_add_rows", tb, ts));
        }
        let d = tb.cols();
        let mut out = tb.data().to_vec();
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= ts.rows() {
                    return Err(NumericsError::IndexOutOfRange { op: "scatter_add_rows", index: i, bound: ts.rows() });
                }
                for c in 0..d {
                    out[r * d + c] += ts.data()[i * d + c];
                }
            }
        }
        let shape = tb.shape().to_vec();
        let ng = self.needs(base) || self.needs(src);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::ScatterAddRows { base, src, idx }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyInput("concat_cols"))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_cols", t)?;
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Val::Owned(Tensor::from_parts(vec![rows, total], out)), Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::EmptyInput("concat_rows"))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            require_matrix("concat_rows", t)?;
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(*first), t));
            }
            out.extend_from_slice(t.data());
        }
        let rows = out.len() / cols;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Val::Owned(Tensor::from_parts(vec![rows, cols], out)), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        require_matrix("slice_rows", t)?;
        if len == 0 || start + len > t.rows() {
            return Err(NumericsError::IndexOutOfRange { op: "slice_rows", index: start + len, bound: t.rows() });
        }
        let d = t.cols();
        let out = t.data()[start * d..(start + len) * d].to_vec();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(vec![len, d], out)), Op::SliceRows { x, start }, ng)
    }

    /// Stacks `n` copies of a single row.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let d = t.cols();
        if t.rows() != 1 || n == 0 {
            return Err(NumericsError::InvalidShape(t.shape().to_vec()));
        }
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(vec![n, d], out)), Op::RepeatRows(x), ng)
    }

    /// Blocked multi-head scaled dot-product attention over projected
    /// queries, keys and values (`[rows x d]`, heads split along columns).
    /// Records its score-matrix size under `stage` when one is given.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        stage: Option<&'static str>,
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttnLayout { heads, q_block, kv_block } = layout;
        if heads == 0 || d % heads != 0 || q_block == 0 || kv_block == 0 {
            return Err(NumericsError::InvalidShape(vec![d, heads, q_block, kv_block]));
        }
        if tk.shape() != tv.shape() || tk.cols() != d {
            return Err(shape_err("attention", tk, tv));
        }
        if tq.rows() % q_block != 0 || tk.rows() % kv_block != 0 || tq.rows() / q_block != tk.rows() / kv_block {
            return Err(shape_err("attention", tq, tk));
        }
        let blocks = tq.rows() / q_block;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = vec![0.0; tq.len()];
        let pb = q_block * kv_block;
        let mut probs = vec![0.0; blocks * heads * pb];
        let qv = View::dense(tq.data(), tq.rows(), d);
        let kv = View::dense(tk.data(), tk.rows(), d);
        let vv = View::dense(tv.data(), tv.rows(), d);
        for g in 0..blocks {
            for h in 0..heads {
                let p = &mut probs[(g * heads + h) * pb..(g * heads + h + 1) * pb];
                let qgh = qv.block(g * q_block, h * dk, q_block, dk);
                let kgh = kv.block(g * kv_block, h * dk, kv_block, dk);
                gemm(scale, qgh, kgh.t(), 0.0, ViewMut::dense(p, q_block, kv_block));
                for row in p.chunks_mut(kv_block) {
                    super::ops::softmax_in_place(row);
                }
                let vgh = vv.block(g * kv_block, h * dk, kv_block, dk);
                let o = ViewMut::dense(&mut out, tq.rows(), d).block(g * q_block, h * dk, q_block, dk);
                gemm(1.0, View::dense(p, q_block, kv_block), vgh, 0.0, o);
            }
        }
        let shape = tq.shape().to_vec();
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        if let Some(stage) = stage {
            self.attention_log.push(AttentionRecord { stage, blocks, heads, q_block, kv_block });
        }
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::Attention { q, k, v, layout, probs }, ng)
    }

    /// Inverted dropout in training mode; identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var, NumericsError> {
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[x.0].value.len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(shape, out)), Op::MaskMul { x, mask }, ng)
    }

    /// Mean negative log-likelihood over rows whose target is present.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        require_matrix("cross_entropy", t)?;
        let (b, vocab) = (t.rows(), t.cols());
        if targets.len() != b {
            return Err(NumericsError::ShapeMismatch { op: "cross_entropy", left: t.shape().to_vec(), right: vec![targets.len()] });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0;
        let mut observed = 0;
        for (r, target) in targets.iter().enumerate() {
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            let Some(target) = *target else { continue };
            if target >= vocab {
                return Err(NumericsError::IndexOutOfRange { op: "cross_entropy", index: target, bound: vocab });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += (max - row[target]) + log_sum;
            super::ops::softmax_in_place(row);
            observed += 1;
        }
        if observed == 0 {
            return Err(NumericsError::AllTargetsMissing);
        }
        let loss = total / observed as f64;
        let ng = self.needs(logits);
        self.push(
            Val::Owned(Tensor::from_parts(vec![1], vec![loss])),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, observed },
            ng,
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.cross_entropy_masked(logits, &t)
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Val::Owned(Tensor::from_parts(vec![1], vec![s])), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar output, seeded with `d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::InvalidShape(lt.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        let mut visits = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            visits += 1;
            self.backward_op(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut trainable_vars: Vec<(usize, Var)> = self
            .param_vars
            .iter()
            .filter_map(|(p, v)| match p {
                ParamRef::Trainable(i) => Some((*i, *v)),
                ParamRef::Frozen(_) => None,
            })
            .collect();
        trainable_vars.sort_unstable();
        Ok(Gradients {
            grads,
            trainable_vars,
            trainable_len: self.trainable.map_or(0, ParamSet::len),
            visits,
        })
    }

    fn backward_op(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let gv = View::dense(g.data(), m, n);
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, ta.shape());
                    gemm(1.0, gv, View::dense(tb.data(), k, n).t(), 1.0, ViewMut::dense(ga.data_mut(), m, k));
                }
                if self.needs(*b) {
                    let gb = grad_buf(grads, *b, tb.shape());
                    gemm(1.0, View::dense(ta.data(), m, k).t(), gv, 1.0, ViewMut::dense(gb.data_mut(), k, n));
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (n, m) = (g.rows(), g.cols());
                    let ga = grad_buf(grads, *a, self.value(*a).shape());
                    for i in 0..m {
                        for j in 0..n {
                            ga.data_mut()[i * n + j] += g.data()[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.needs(*x) {
                        grad_buf(grads, *x, g.shape()).axpy(1.0, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = grad_buf(grads, *a, ta.shape());
                    for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gi * bi;
                    }
                }
                if self.needs(*b) {
                    let gb = grad_buf(grads, *b, tb.shape());
                    for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    grad_buf(grads, *a, g.shape()).axpy(*c, g);
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    grad_buf(grads, *x, g.shape()).axpy(1.0, g);
                }
                if self.needs(*row) {
                    let c = g.cols();
                    let gr = grad_buf(grads, *row, self.value(*row).shape());
                    for (i, gi) in g.data().iter().enumerate() {
                        gr.data_mut()[i % c] += gi;
                    }
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    let tx = self.value(*x);
                    let gx = grad_buf(grads, *x, tx.shape());
                    for ((o, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(tx.data()) {
                        *o += gi * gelu_grad_scalar(*xi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.needs(*x) {
                    let gx = grad_buf(grads, *x, out.shape());
                    for ((o, gi), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gi * y * (1.0 - y);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let c = out.cols();
                    let gx = grad_buf(grads, *x, out.shape());
                    for ((gxr, gr), yr) in gx.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(out.data().chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gxr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = g.cols();
                let tg = self.value(*gamma);
                if self.needs(*gamma) {
                    let gg = grad_buf(grads, *gamma, tg.shape());
                    for (i, gi) in g.data().iter().enumerate() {
                        gg.data_mut()[i % d] += gi * xhat[i];
                    }
                }
                if self.needs(*beta) {
                    let gb = grad_buf(grads, *beta, self.value(*beta).shape());
                    for (i, gi) in g.data().iter().enumerate() {
                        gb.data_mut()[i % d] += gi;
                    }
                }
                if self.needs(*x) {
                    let gx = grad_buf(grads, *x, g.shape());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        let gr = g.row_slice(r);
                        let xh = &xhat[r * d..(r + 1) * d];
                        for c in 0..d {
                            dxhat[c] = gr[c] * tg.data()[c];
                        }
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let dn = d as f64;
                        let out_row = &mut gx.data_mut()[r * d..(r + 1) * d];
                        for c in 0..d {
                            out_row[c] += inv_std[r] / dn * (dn * dxhat[c] - sum - xh[c] * dot);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if self.needs(*table) {
                    let d = g.cols();
                    let gt = grad_buf(grads, *table, self.value(*table).shape());
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gt.data_mut()[i * d..(i + 1) * d];
                        for (o, gi) in dst.iter_mut().zip(g.row_slice(r)) {
                            *o += gi;
                        }
                    }
                }
            }
            Op::ScatterAddRows { base, src, idx } => {
                if self.needs(*base) {
                    grad_buf(grads, *base, g.shape()).axpy(1.0, g);
                }
                if self.needs(*src) {
                    let d = g.cols();
                    let gs = grad_buf(grads, *src, self.value(*src).shape());
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            let dst = &mut gs.data_mut()[i * d..(i + 1) * d];
                            for (o, gi) in dst.iter_mut().zip(g.row_slice(r)) {
                                *o += gi;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if self.needs(p) {
                        let gp = grad_buf(grads, p, tp.shape());
                        for r in 0..rows {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (o, s) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *o += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.len();
                    if self.needs(p) {
                        let gp = grad_buf(grads, p, tp.shape());
                        for (o, s) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *o += s;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let d = g.cols();
                    let gx = grad_buf(grads, *x, self.value(*x).shape());
                    for (o, s) in gx.data_mut()[start * d..start * d + g.len()].iter_mut().zip(g.data()) {
                        *o += s;
                    }
                }
            }
            Op::RepeatRows(x) => {
                if self.needs(*x) {
                    let d = g.cols();
                    let gx = grad_buf(grads, *x, self.value(*x).shape());
                    for row in g.data().chunks(d) {
                        for (o, s) in gx.data_mut().iter_mut().zip(row) {
                            *o += s;
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, *layout, probs, g, grads);
            }
            Op::MaskMul { x, mask } => {
                if self.needs(*x) {
                    let gx = grad_buf(grads, *x, g.shape());
                    for ((o, gi), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, observed } => {
                if self.needs(*logits) {
                    let scale = g.data()[0] / *observed as f64;
                    let tl = self.value(*logits);
                    let vocab = tl.cols();
                    let gl = grad_buf(grads, *logits, tl.shape());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        let row = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        for j in 0..vocab {
                            row[j] += scale * p[j];
                        }
                        row[target] -= scale;
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    let s = g.data()[0];
                    let gx = grad_buf(grads, *x, self.value(*x).shape());
                    for o in gx.data_mut() {
                        *o += s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let AttnLayout { heads, q_block, kv_block } = layout;
        let blocks = tq.rows() / q_block;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let pb = q_block * kv_block;
        let (nq, nk) = (tq.rows(), tk.rows());
        let gv = View::dense(g.data(), nq, d);
        let mut ds = vec![0.0; pb];
        // Temporarily take the gradient buffers so all three can be written.
        let mut gq = self.needs(q).then(|| take_buf(grads, q, tq.shape()));
        let mut gk = self.needs(k).then(|| take_buf(grads, k, tk.shape()));
        let mut gvv = self.needs(v).then(|| take_buf(grads, v, tv.shape()));
        for gi in 0..blocks {
            for h in 0..heads {
                let p = &probs[(gi * heads + h) * pb..(gi * heads + h + 1) * pb];
                let pv = View::dense(p, q_block, kv_block);
                let go = gv.block(gi * q_block, h * dk, q_block, dk);
                let vgh = View::dense(tv.data(), nk, d).block(gi * kv_block, h * dk, kv_block, dk);
                if let Some(buf) = gvv.as_mut() {
                    let dst = ViewMut::dense(buf.data_mut(), nk, d).block(gi * kv_block, h * dk, kv_block, dk);
                    gemm(1.0, pv.t(), go, 1.0, dst);
                }
                if gq.is_none() && gk.is_none() {
                    continue;
                }
                // dP = dO V^T, then softmax backward into dS (scaled).
                gemm(1.0, go, vgh.t(), 0.0, ViewMut::dense(&mut ds, q_block, kv_block));
                for (dsr, pr) in ds.chunks_mut(kv_block).zip(p.chunks(kv_block)) {
                    let dot: f64 = dsr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for j in 0..kv_block {
                        dsr[j] = pr[j] * (dsr[j] - dot) * scale;
                    }
                }
                let dsv = View::dense(&ds, q_block, kv_block);
                if let Some(buf) = gq.as_mut() {
                    let kgh = View::dense(tk.data(), nk, d).block(gi * kv_block, h * dk, kv_block, dk);
                    let dst = ViewMut::dense(buf.data_mut(), nq, d).block(gi * q_block, h * dk, q_block, dk);
                    gemm(1.0, dsv, kgh, 1.0, dst);
                }
                if let Some(buf) = gk.as_mut() {
                    let qgh = View::dense(tq.data(), nq, d).block(gi * q_block, h * dk, q_block, dk);
                    let dst = ViewMut::dense(buf.data_mut(), nk, d).block(gi * kv_block, h * dk, kv_block, dk);
                    gemm(1.0, dsv.t(), qgh, 1.0, dst);
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gvv)] {
            if let Some(buf) = buf {
                match grads[var.0].as_mut() {
                    // q, k and v may be the same var
                    Some(existing) => existing.axpy(1.0, &buf),
                    None => grads[var.0] = Some(buf),
                }
            }
        }
    }
}

fn grad_buf<'g>(grads: &'g mut [Option<Tensor>], var: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[var.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn take_buf(grads: &mut [Option<Tensor>], var: Var, shape: &[usize]) -> Tensor {
    grads[var.0].take().unwrap_or_else(|| Tensor::zeros(shape))
}

#[cfg(debug_assertions)]
fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::Gelu(_) => "gelu",
        Op::Sigmoid(_) => "sigmoid",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::ConcatCols(_) => "concat_cols",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::RepeatRows(_) => "repeat_rows",
        Op::Attention { .. } => "attention",
        Op::MaskMul { .. } => "dropout",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Sum(_) => "sum",
    }
}
