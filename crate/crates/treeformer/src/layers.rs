//! Shared transformer building blocks: multi-head scaled dot-product
//! attention, position-wise feed-forward, post-norm residual wiring, and
//! sinusoidal positions. Used by the token pre-encoder and the decoder head.

use crate::rng::Prng;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{s, Scalar, Tensor};
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct AttnParams {
    pub wq: TensorId,
    pub wk: TensorId,
    pub wv: TensorId,
    pub wo: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w1: TensorId,
    pub b1: TensorId,
    pub w2: TensorId,
    pub b2: TensorId,
}

#[derive(Clone, Copy, Debug)]
pub struct LnParams {
    pub gamma: TensorId,
    pub beta: TensorId,
}

/// Training-mode dropout context; `rng: None` disables it (eval mode).
pub struct DropoutCtx<'a> {
    pub p: f64,
    pub rng: Option<&'a mut Prng>,
}

impl DropoutCtx<'_> {
    pub fn disabled() -> DropoutCtx<'static> {
        DropoutCtx { p: 0.0, rng: None }
    }

    pub fn apply<F: Scalar>(&mut self, tape: &mut Tape<F>, x: TensorId) -> TensorId {
        let Some(rng) = self.rng.as_deref_mut() else {
            return x;
        };
        if self.p <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.p;
        let n = tape.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| {
                if rng.gen_range(0.0..1.0) < keep {
                    s::<F>(1.0 / keep)
                } else {
                    F::zero()
                }
            })
            .collect();
        tape.dropout(x, mask)
    }
}

/// Multi-head attention. `x_q` is [n x d], `x_kv` is [m x d]; `mask`, when
/// present, is an [n x m] additive score mask (0 or a large negative number).
/// Returns [n x d] along with the per-head attention weights for inspection.
pub fn multi_head_attention<F: Scalar>(
    tape: &mut Tape<F>,
    x_q: TensorId,
    x_kv: TensorId,
    params: &AttnParams,
    n_heads: usize,
    mask: Option<TensorId>,
) -> (TensorId, Vec<TensorId>) {
    let d = tape.value(x_q).cols();
    assert!(
        d % n_heads == 0,
        "model dim {d} not divisible by {n_heads} heads"
    );
    let dh = d / n_heads;
    let wq_t = tape.transpose(params.wq);
    let wk_t = tape.transpose(params.wk);
    let wv_t = tape.transpose(params.wv);
    let q = tape.matmul(x_q, wq_t);
    let k = tape.matmul(x_kv, wk_t);
    let v = tape.matmul(x_kv, wv_t);
    let scale = s::<F>(1.0 / (dh as f64).sqrt());
    let mut head_outs = Vec::with_capacity(n_heads);
    let mut head_weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kh_t = tape.transpose(kh);
        let raw = tape.matmul(qh, kh_t);
        let mut scores = tape.scale(raw, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m);
        }
        let attn = tape.softmax_last(scores);
        head_weights.push(attn);
        head_outs.push(tape.matmul(attn, vh));
    }
    let mut merged = head_outs[0];
    for &h in &head_outs[1..] {
        merged = tape.concat_last(merged, h);
    }
    let wo_t = tape.transpose(params.wo);
    (tape.matmul(merged, wo_t), head_weights)
}

pub fn feed_forward<F: Scalar>(tape: &mut Tape<F>, x: TensorId, p: &FfnParams) -> TensorId {
    let w1_t = tape.transpose(p.w1);
    let h = tape.matmul(x, w1_t);
    let h = tape.add_row_broadcast(h, p.b1);
    let h = tape.relu(h);
    let w2_t = tape.transpose(p.w2);
    let out = tape.matmul(h, w2_t);
    tape.add_row_broadcast(out, p.b2)
}

pub fn layer_norm<F: Scalar>(tape: &mut Tape<F>, x: TensorId, p: &LnParams) -> TensorId {
    tape.layer_norm(x, p.gamma, p.beta, s::<F>(LN_EPS))
}

/// Post-norm residual block: `LN(x + sublayer_out)`.
pub fn residual_norm<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    sublayer_out: TensorId,
    ln: &LnParams,
) -> TensorId {
    let sum = tape.add(x, sublayer_out);
    layer_norm(tape, sum, ln)
}

/// Additive causal mask for self-attention over `n` positions.
pub fn causal_mask<F: Scalar>(tape: &mut Tape<F>, n: usize) -> TensorId {
    let neg = s::<F>(-1e9);
    let mut data = vec![F::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = neg;
        }
    }
    tape.constant(Tensor::matrix(n, n, data))
}

/// Classic sinusoidal positional encoding table, [n x d].
pub fn sinusoidal_positions<F: Scalar>(n: usize, d: usize) -> Tensor<F> {
    let mut data = vec![F::zero(); n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = s::<F>(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(n, d, data)
}
