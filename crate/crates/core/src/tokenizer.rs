//! Hierarchical temporal tokenization: day segments refined by local
//! attention, pooled into one token each, then mixed by attention across
//! segments. The gated pre-norm block is shared with the frozen backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{init, AttentionRecord, AttnLayout, NumericsError, ParamRef, ParamSet, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const STAGE_INTRA: &str = "intra";
pub const STAGE_POOL: &str = "pool";
pub const STAGE_INTER: &str = "inter";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TokenizerError {
    #[error("sequence of {len} rows does not split into segments of {segment}")]
    IndivisibleLength { len: usize, segment: usize },
    #[error("cannot pool an empty segment")]
    EmptySegment,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One pre-norm gated transformer layer. Weights are `[in x out]`; the
/// query/key/value projections hold all heads side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub norm1_gain: ParamRef,
    pub norm1_bias: ParamRef,
    pub query: ParamRef,
    pub key: ParamRef,
    pub value: ParamRef,
    pub output: ParamRef,
    pub norm2_gain: ParamRef,
    pub norm2_bias: ParamRef,
    pub gate: ParamRef,
    pub ffn_in: ParamRef,
    pub ffn_out: ParamRef,
}

impl BlockParams {
    /// Appends a freshly initialized layer to `set`. With `frozen` the
    /// handles point into a frozen parameter set.
    pub fn register<R: Rng + ?Sized>(set: &mut ParamSet, prefix: &str, dim: usize, frozen: bool, rng: &mut R) -> Self {
        let mut add = |name: &str, t: Tensor| {
            let i = set.push(format!("{prefix}.{name}"), t);
            if frozen {
                ParamRef::Frozen(i)
            } else {
                ParamRef::Trainable(i)
            }
        };
        Self {
            norm1_gain: add("norm1_gain", Tensor::filled(&[dim], 1.0)),
            norm1_bias: add("norm1_bias", Tensor::zeros(&[dim])),
            query: add("query", init::scaled_normal(dim, dim, rng)),
            key: add("key", init::scaled_normal(dim, dim, rng)),
            value: add("value", init::scaled_normal(dim, dim, rng)),
            output: add("output", init::scaled_normal(dim, dim, rng)),
            norm2_gain: add("norm2_gain", Tensor::filled(&[dim], 1.0)),
            norm2_bias: add("norm2_bias", Tensor::zeros(&[dim])),
            gate: add("gate", init::scaled_normal(dim, dim, rng)),
            ffn_in: add("ffn_in", init::scaled_normal(dim, 4 * dim, rng)),
            ffn_out: add("ffn_out", init::scaled_normal(4 * dim, dim, rng)),
        }
    }

    pub fn refs(&self) -> [ParamRef; 11] {
        [
            self.norm1_gain,
            self.norm1_bias,
            self.query,
            self.key,
            self.value,
            self.output,
            self.norm2_gain,
            self.norm2_bias,
            self.gate,
            self.ffn_in,
            self.ffn_out,
        ]
    }
}

/// `Z = X + MHA(LN(X))`, then `Z + (FFN(LN(Z)) * sigmoid(LN(Z) W_gate))`
/// with `FFN(U) = GELU(U W_1) W_2`. Attention is non-causal within each
/// block of `layout`.
pub fn gated_block(
    tape: &mut Tape<'_>,
    x: Var,
    p: &BlockParams,
    layout: AttnLayout,
    dropout: f64,
    stage: Option<&'static str>,
) -> Result<Var, TokenizerError> {
    let g1 = tape.param(p.norm1_gain);
    let b1 = tape.param(p.norm1_bias);
    let h = tape.layer_norm(x, g1, b1, LAYER_NORM_EPS)?;
    let (wq, wk, wv, wo) = (tape.param(p.query), tape.param(p.key), tape.param(p.value), tape.param(p.output));
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let v = tape.matmul(h, wv)?;
    let a = tape.attention(q, k, v, layout, stage)?;
    let a = tape.matmul(a, wo)?;
    let a = tape.dropout(a, dropout)?;
    let z = tape.add(x, a)?;

    let g2 = tape.param(p.norm2_gain);
    let b2 = tape.param(p.norm2_bias);
    let u = tape.layer_norm(z, g2, b2, LAYER_NORM_EPS)?;
    let (w1, w2, wg) = (tape.param(p.ffn_in), tape.param(p.ffn_out), tape.param(p.gate));
    let f = tape.matmul(u, w1)?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, w2)?;
    let gate = tape.matmul(u, wg)?;
    let gate = tape.sigmoid(gate)?;
    let f = tape.mul(f, gate)?;
    let f = tape.dropout(f, dropout)?;
    Ok(tape.add(z, f)?)
}

/// Splits `[n x d]` rows into consecutive `[len x d]` segments.
pub fn segment(x: &Tensor, len: usize) -> Result<Vec<Tensor>, TokenizerError> {
    let n = x.rows();
    if len == 0 || n % len != 0 {
        return Err(TokenizerError::IndivisibleLength { len: n, segment: len });
    }
    let d = x.cols();
    x.data()
        .chunks(len * d)
        .map(|c| Tensor::matrix(len, d, c.to_vec()).map_err(Into::into))
        .collect()
}

/// Inverse of [`segment`].
pub fn concat_segments(segments: &[Tensor]) -> Result<Tensor, TokenizerError> {
    let first = segments.first().ok_or(TokenizerError::EmptySegment)?;
    let d = first.cols();
    let mut data = Vec::new();
    for s in segments {
        if s.cols() != d {
            return Err(NumericsError::ShapeMismatch { op: "concat_segments", left: first.shape().to_vec(), right: s.shape().to_vec() }.into());
        }
        data.extend_from_slice(s.data());
    }
    Ok(Tensor::matrix(data.len() / d, d, data)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    /// Single learned query attending over projected slot rows.
    #[default]
    Attention,
    /// Plain average of the refined rows.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub intra_layers: usize,
    pub inter_layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub segment_len: usize,
    pub pool: PoolKind,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { intra_layers: 2, inter_layers: 2, heads: 4, dropout: 0.1, segment_len: 48, pool: PoolKind::Attention }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolParams {
    pub query: ParamRef,
    pub key: ParamRef,
    pub value: ParamRef,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerParams {
    pub config: TokenizerConfig,
    pub dim: usize,
    pub intra: Vec<BlockParams>,
    pub inter: Vec<BlockParams>,
    pub pool: Option<PoolParams>,
}

impl TokenizerParams {
    pub fn register<R: Rng + ?Sized>(set: &mut ParamSet, config: TokenizerConfig, dim: usize, rng: &mut R) -> Self {
        let intra = (0..config.intra_layers)
            .map(|l| BlockParams::register(set, &format!("tokenizer.intra{l}"), dim, false, rng))
            .collect();
        let pool = match config.pool {
            PoolKind::Mean => None,
            PoolKind::Attention => {
                let std = 1.0 / (dim as f64).sqrt();
                Some(PoolParams {
                    query: ParamRef::Trainable(set.push("tokenizer.pool.query", init::normal(&[1, dim], std, rng))),
                    key: ParamRef::Trainable(set.push("tokenizer.pool.key", init::scaled_normal(dim, dim, rng))),
                    value: ParamRef::Trainable(set.push("tokenizer.pool.value", init::scaled_normal(dim, dim, rng))),
                })
            }
        };
        let inter = (0..config.inter_layers)
            .map(|l| BlockParams::register(set, &format!("tokenizer.inter{l}"), dim, false, rng))
            .collect();
        Self { config, dim, intra, inter, pool }
    }

    fn segments(&self, tape: &Tape<'_>, x: Var) -> Result<usize, TokenizerError> {
        let n = tape.value(x).rows();
        let len = self.config.segment_len;
        if len == 0 || n == 0 || n % len != 0 {
            return Err(TokenizerError::IndivisibleLength { len: n, segment: len });
        }
        Ok(n / len)
    }

    /// Runs the intra-segment stack over every segment of `x` at once;
    /// attention never crosses a segment boundary.
    pub fn intra_attention(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TokenizerError> {
        self.segments(tape, x)?;
        let len = self.config.segment_len;
        let layout = AttnLayout { heads: self.config.heads, q_block: len, kv_block: len };
        let mut h = x;
        for block in &self.intra {
            h = gated_block(tape, h, block, layout, self.config.dropout, Some(STAGE_INTRA))?;
        }
        Ok(h)
    }

    /// Compresses each segment into one row: `[N*L x D] -> [N x D]`.
    pub fn pool(&self, tape: &mut Tape<'_>, refined: Var) -> Result<Var, TokenizerError> {
        let n = self.segments(tape, refined)?;
        let layout = AttnLayout { heads: 1, q_block: 1, kv_block: self.config.segment_len };
        match &self.pool {
            Some(p) => {
                let q = tape.param(p.query);
                let q = tape.repeat_rows(q, n)?;
                let wk = tape.param(p.key);
                let wv = tape.param(p.value);
                let k = tape.matmul(refined, wk)?;
                let v = tape.matmul(refined, wv)?;
                Ok(tape.attention(q, k, v, layout, Some(STAGE_POOL))?)
            }
            None => {
                // A zero query gives uniform weights, i.e. the mean.
                let q = tape.constant(Tensor::zeros(&[n, self.dim]))?;
                Ok(tape.attention(q, refined, refined, layout, Some(STAGE_POOL))?)
            }
        }
    }

    /// Full attention across segment tokens.
    pub fn inter_attention(&self, tape: &mut Tape<'_>, tokens: Var) -> Result<Var, TokenizerError> {
        let n = tape.value(tokens).rows();
        let layout = AttnLayout { heads: self.config.heads, q_block: n, kv_block: n };
        let mut h = tokens;
        for block in &self.inter {
            h = gated_block(tape, h, block, layout, self.config.dropout, Some(STAGE_INTER))?;
        }
        Ok(h)
    }

    /// Segment, refine, pool and mix: `[N*L x D] -> [N x D]`.
    pub fn tokenize(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, TokenizerError> {
        let refined = self.intra_attention(tape, x)?;
        let tokens = self.pool(tape, refined)?;
        self.inter_attention(tape, tokens)
    }

    pub fn trainable_refs(&self) -> Vec<ParamRef> {
        let mut out: Vec<ParamRef> = self.intra.iter().chain(&self.inter).flat_map(|b| b.refs()).collect();
        if let Some(p) = &self.pool {
            out.extend([p.query, p.key, p.value]);
        }
        out
    }
}

/// Attention score-matrix entries of one layer and one head, per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionCount {
    pub intra: usize,
    pub pool: usize,
    pub inter: usize,
}

impl AttentionCount {
    pub fn from_log(log: &[AttentionRecord]) -> Self {
        let first = |stage: &str| log.iter().find(|r| r.stage == stage).map_or(0, AttentionRecord::entries_per_head);
        Self { intra: first(STAGE_INTRA), pool: first(STAGE_POOL), inter: first(STAGE_INTER) }
    }

    /// Entries spent mixing the history: intra-segment plus inter-segment.
    pub fn history_entries(&self) -> usize {
        self.intra + self.inter
    }

    /// Entries of one dense attention layer over `len` rows.
    pub fn dense_entries(len: usize) -> usize {
        len * len
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{check_param_gradient, finite_diff_check, gelu, layer_norm, matmul, sigmoid, DEFAULT_STEP};

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        init::uniform(&[rows, cols], 1.0, rng)
    }

    fn one_block(dim: usize, seed: u64) -> (ParamSet, BlockParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = BlockParams::register(&mut set, "b", dim, false, &mut rng);
        (set, b)
    }

    fn get<'a>(set: &'a ParamSet, r: ParamRef) -> &'a Tensor {
        match r {
            ParamRef::Trainable(i) | ParamRef::Frozen(i) => set.get(i),
        }
    }

    fn run_block(set: &ParamSet, b: &BlockParams, x: &Tensor, heads: usize) -> Tensor {
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(set, &frozen);
        let xv = tape.constant(x.clone()).unwrap();
        let n = x.rows();
        let out = gated_block(&mut tape, xv, b, AttnLayout { heads, q_block: n, kv_block: n }, 0.1, None).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_row_matches_hand_expansion() {
        let (mut set, b) = one_block(8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Non-trivial norms so the expansion exercises every parameter.
        for r in [b.norm1_gain, b.norm1_bias, b.norm2_gain, b.norm2_bias] {
            let ParamRef::Trainable(i) = r else { unreachable!() };
            *set.get_mut(i) = init::uniform(&[8], 1.0, &mut rng);
        }
        let x = random(&mut rng, 1, 8);
        let got = run_block(&set, &b, &x, 2);

        // One key: every head's softmax weight is 1, so attention = value rows.
        let p = |r| get(&set, r);
        let h = layer_norm(&x, p(b.norm1_gain), p(b.norm1_bias), LAYER_NORM_EPS).unwrap();
        let v = matmul(&h, p(b.value)).unwrap();
        let mut z = matmul(&v, p(b.output)).unwrap();
        z.axpy(1.0, &x);
        let u = layer_norm(&z, p(b.norm2_gain), p(b.norm2_bias), LAYER_NORM_EPS).unwrap();
        let f = matmul(&gelu(&matmul(&u, p(b.ffn_in)).unwrap()), p(b.ffn_out)).unwrap();
        let g = sigmoid(&matmul(&u, p(b.gate)).unwrap());
        let expect: Vec<f64> = (0..8).map(|i| z.data()[i] + f.data()[i] * g.data()[i]).collect();
        let expect = Tensor::matrix(1, 8, expect).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (mut set, b) = one_block(8, 3);
        for r in [b.output, b.ffn_out] {
            let ParamRef::Trainable(i) = r else { unreachable!() };
            set.get_mut(i).scale_in_place(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 5, 8);
        assert_eq!(run_block(&set, &b, &x, 2), x);
    }

    fn block_loss(set: &ParamSet, b: &BlockParams, x: &Tensor, index: usize) -> Result<(f64, Tensor), NumericsError> {
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(set, &frozen);
        let xv = tape.constant(x.clone())?;
        let layout = AttnLayout { heads: 2, q_block: x.rows(), kv_block: x.rows() };
        let out = gated_block(&mut tape, xv, b, layout, 0.0, None).map_err(|e| match e {
            TokenizerError::Numerics(n) => n,
            other => panic!("{other}"),
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let w = tape.constant(init::uniform(tape.value(out).shape(), 1.0, &mut rng))?;
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let value = tape.value(loss).data()[0];
        let g = tape.backward(loss)?.into_trainable()[index].clone().unwrap();
        Ok((value, g))
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (set, b) = one_block(6, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 4, 6);
        for index in 0..set.len() {
            let coords: Vec<usize> = (0..set.get(index).len()).collect();
            let err = check_param_gradient(&set, index, &coords, DEFAULT_STEP, |p| block_loss(p, &b, &x, index)).unwrap();
            assert!(err < 1e-4, "{}: {err}", set.name(index));
        }
        // And with respect to the block input.
        let f = |theta: &Tensor| {
            let frozen = ParamSet::new();
            let mut tape = Tape::with_params(&set, &frozen);
            let xv = tape.leaf(theta.clone())?;
            let layout = AttnLayout { heads: 2, q_block: 4, kv_block: 4 };
            let out = gated_block(&mut tape, xv, &b, layout, 0.0, None).unwrap();
            let loss = tape.sum(out)?;
            let value = tape.value(loss).data()[0];
            let g = tape.backward(loss)?.wrt(xv).unwrap().clone();
            Ok((value, g))
        };
        assert!(finite_diff_check(f, &x, DEFAULT_STEP).unwrap() < 1e-4);
    }

    #[test]
    fn segmentation_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, 336, 3);
        let segs = segment(&x, 48).unwrap();
        assert_eq!(segs.len(), 7);
        assert_eq!(concat_segments(&segs).unwrap(), x);
        assert_eq!(segment(&x, 336).unwrap().len(), 1);
        assert!(matches!(segment(&x, 50), Err(TokenizerError::IndivisibleLength { len: 336, segment: 50 })));
    }

    fn tokenizer(config: TokenizerConfig, dim: usize, seed: u64) -> (ParamSet, TokenizerParams) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = TokenizerParams::register(&mut set, config, dim, &mut rng);
        (set, t)
    }

    #[test]
    fn zero_layers_are_identity() {
        let cfg = TokenizerConfig { intra_layers: 0, inter_layers: 0, segment_len: 4, ..Default::default() };
        let (set, t) = tokenizer(cfg, 8, 1);
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(&set, &frozen);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.constant(random(&mut rng, 12, 8)).unwrap();
        assert_eq!(t.intra_attention(&mut tape, x).unwrap(), x);
        assert_eq!(t.inter_attention(&mut tape, x).unwrap(), x);
    }

    #[test]
    fn identical_segments_give_identical_outputs() {
        let cfg = TokenizerConfig { segment_len: 6, ..Default::default() };
        let (set, t) = tokenizer(cfg, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg = random(&mut rng, 6, 8);
        let other = random(&mut rng, 6, 8);
        let x = concat_segments(&[seg.clone(), other, seg]).unwrap();
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(&set, &frozen);
        let xv = tape.constant(x).unwrap();
        let out = t.intra_attention(&mut tape, xv).unwrap();
        let segs = segment(tape.value(out), 6).unwrap();
        assert_eq!(segs[0].shape(), &[6, 8]);
        assert!(segs[0].max_abs_diff(&segs[2]) < 1e-12);
        assert!(segs[0].max_abs_diff(&segs[1]) > 1e-3);
    }

    fn pooled(set: &ParamSet, t: &TokenizerParams, x: &Tensor) -> Tensor {
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(set, &frozen);
        let xv = tape.constant(x.clone()).unwrap();
        let out = t.pool(&mut tape, xv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn pooling_identical_rows_returns_their_value() {
        let cfg = TokenizerConfig { segment_len: 48, ..Default::default() };
        let (set, t) = tokenizer(cfg, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let row = random(&mut rng, 1, 8);
        let x = Tensor::matrix(48, 8, row.data().repeat(48)).unwrap();
        let p = t.pool.as_ref().unwrap();
        let expect = matmul(&row, get(&set, p.value)).unwrap();
        assert!(pooled(&set, &t, &x).max_abs_diff(&expect) < 1e-12);
    }

    /// Attention-pooling weights recomputed directly.
    fn pool_weights(set: &ParamSet, p: &PoolParams, x: &Tensor) -> Vec<f64> {
        let k = matmul(x, get(set, p.key)).unwrap();
        let q = get(set, p.query);
        let d = x.cols() as f64;
        let scores: Vec<f64> = (0..x.rows())
            .map(|j| k.row_slice(j).iter().zip(q.data()).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    #[test]
    fn pooled_token_is_convex_combination_of_values() {
        let cfg = TokenizerConfig { segment_len: 10, ..Default::default() };
        let (mut set, t) = tokenizer(cfg, 6, 7);
        let p = t.pool.clone().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 10, 6);
        let values = matmul(&x, get(&set, p.value)).unwrap();
        let mut previous: Option<Vec<f64>> = None;
        for _ in 0..2 {
            let w = pool_weights(&set, &p, &x);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(w.iter().all(|v| *v >= 0.0));
            let out = pooled(&set, &t, &x);
            for c in 0..6 {
                let combo: f64 = (0..10).map(|j| w[j] * values.get2(j, c)).sum();
                assert!((out.data()[c] - combo).abs() < 1e-12);
                let lo = (0..10).map(|j| values.get2(j, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..10).map(|j| values.get2(j, c)).fold(f64::NEG_INFINITY, f64::max);
                assert!(out.data()[c] >= lo - 1e-12 && out.data()[c] <= hi + 1e-12);
            }
            if let Some(prev) = &previous {
                assert!(prev.iter().zip(&w).any(|(a, b)| (a - b).abs() > 1e-6));
            }
            previous = Some(w);
            let ParamRef::Trainable(i) = p.query else { unreachable!() };
            set.get_mut(i).scale_in_place(2.0);
        }
    }

    #[test]
    fn mean_pooling_averages_rows() {
        let cfg = TokenizerConfig { segment_len: 4, pool: PoolKind::Mean, ..Default::default() };
        let (set, t) = tokenizer(cfg, 3, 9);
        let x = Tensor::matrix(8, 3, (0..24).map(f64::from).collect()).unwrap();
        let out = pooled(&set, &t, &x);
        let expect = Tensor::matrix(2, 3, vec![4.5, 5.5, 6.5, 16.5, 17.5, 18.5]).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn default_history_attention_entries() {
        let (set, t) = tokenizer(TokenizerConfig::default(), 16, 10);
        let frozen = ParamSet::new();
        let mut tape = Tape::with_params(&set, &frozen);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = tape.constant(random(&mut rng, 336, 16)).unwrap();
        let tokens = t.tokenize(&mut tape, x).unwrap();
        assert_eq!(tape.value(tokens).shape(), &[7, 16]);
        let count = AttentionCount::from_log(tape.attention_log());
        assert_eq!(count.intra, 7 * 48 * 48);
        assert_eq!(count.inter, 49);
        assert_eq!(count.history_entries(), 16177);
        assert_eq!(AttentionCount::dense_entries(336), 112_896);
        assert!(AttentionCount::dense_entries(336) >= 5 * count.history_entries());
    }

    #[test]
    fn eval_mode_is_deterministic_and_ignores_dropout_rate() {
        let run = |dropout: f64| {
            let cfg = TokenizerConfig { segment_len: 4, dropout, ..Default::default() };
            let (set, t) = tokenizer(cfg, 8, 12);
            let frozen = ParamSet::new();
            let mut tape = Tape::with_params(&set, &frozen);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let x = tape.constant(random(&mut rng, 12, 8)).unwrap();
            let out = t.tokenize(&mut tape, x).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(0.1), run(0.1));
        assert_eq!(run(0.0), run(0.5));
    }

    #[test]
    fn training_mode_applies_dropout() {
        let cfg = TokenizerConfig { segment_len: 4, dropout: 0.5, ..Default::default() };
        let (set, t) = tokenizer(cfg, 8, 14);
        let frozen = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, 12, 8);
        let run = |train: bool| {
            let mut tape = Tape::with_params(&set, &frozen);
            if train {
                tape.enable_dropout(ChaCha8Rng::seed_from_u64(1));
            }
            let xv = tape.constant(x.clone()).unwrap();
            let out = t.tokenize(&mut tape, xv).unwrap();
            tape.value(out).clone()
        };
        assert!(run(true).max_abs_diff(&run(false)) > 1e-6);
    }
}
