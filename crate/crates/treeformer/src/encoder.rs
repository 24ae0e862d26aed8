//! The chart encoder: compose pairs of sub-span vectors, pool the candidates
//! of every split with scaled dot-product attention, and fill the chart
//! bottom-up. Two schedules produce identical numbers: a per-cell sequential
//! reference, and a level-parallel form that batches every span of one length
//! into a single compose + pool.

use crate::chart::{split_pairs, Span, SpanChart};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{s, Scalar};
use rand::Rng;

#[derive(Clone, Copy, Debug)]
pub struct TreeformerConfig {
    /// model dimension d
    pub d: usize,
    /// maximum phrase length materialized in the chart
    pub h_max: usize,
    /// dropout on composed candidates before pooling (training mode only)
    pub dropout: f64,
    /// affine composition (bias term); off reproduces the bare linear map
    pub compose_bias: bool,
    /// learned Q/K projections in pooling; off pins both to identity
    pub learned_qk: bool,
    /// optional tanh after composition, a training-stability knob
    pub compose_tanh: bool,
}

impl TreeformerConfig {
    pub fn new(d: usize, h_max: usize) -> Self {
        TreeformerConfig {
            d,
            h_max,
            dropout: 0.0,
            compose_bias: true,
            learned_qk: true,
            compose_tanh: false,
        }
    }
}

/// Tape handles for the encoder parameters: W (d x 2d), optional b (1 x d),
/// pooling target w (1 x d), and pooling projections Q, K (d x d).
#[derive(Clone, Copy, Debug)]
pub struct EncoderParams {
    pub w_comp: TensorId,
    pub b_comp: Option<TensorId>,
    pub w_pool: TensorId,
    pub q_pool: TensorId,
    pub k_pool: TensorId,
}

/// Instrumented operation counts for one encoding pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub compositions: u64,
    pub pooling_candidate_total: u64,
    pub cells_written: u64,
    /// sequential dependency stages (pooled levels) executed
    pub level_steps: u64,
}

impl OpCounters {
    pub fn reset(&mut self) {
        *self = OpCounters::default();
    }
}

/// Optional hooks threaded through an encoding pass: op counters, per-cell
/// attention weight traces, and training-mode dropout.
#[derive(Default)]
pub struct EncodeHooks<'a, F: Scalar> {
    pub counters: Option<&'a mut OpCounters>,
    pub trace: Option<&'a mut Vec<(Span, Vec<F>)>>,
    pub dropout_rng: Option<&'a mut Prng>,
}

impl<'a, F: Scalar> EncodeHooks<'a, F> {
    pub fn none() -> Self {
        EncodeHooks {
            counters: None,
            trace: None,
            dropout_rng: None,
        }
    }

    pub fn counting(counters: &'a mut OpCounters) -> Self {
        EncodeHooks {
            counters: Some(counters),
            trace: None,
            dropout_rng: None,
        }
    }

    fn count(&mut self, f: impl FnOnce(&mut OpCounters)) {
        if let Some(c) = self.counters.as_deref_mut() {
            f(c);
        }
    }
}

/// Per-forward-pass precomputation: W transposed for row-major composition,
/// Q transposed, and the pooling key K·w (constant across candidates, so it
/// is computed once).
pub struct EncoderPass<F: Scalar> {
    cfg: TreeformerConfig,
    w_t: TensorId,
    bias: Option<TensorId>,
    q_t: Option<TensorId>,
    /// K·w as a column vector [d x 1]
    key_col: TensorId,
    inv_sqrt_d: F,
}

impl<F: Scalar> EncoderPass<F> {
    pub fn new(tape: &mut Tape<F>, params: &EncoderParams, cfg: TreeformerConfig) -> Self {
        let w_t = tape.transpose(params.w_comp);
        let key_row = if cfg.learned_qk {
            let k_t = tape.transpose(params.k_pool);
            tape.matmul(params.w_pool, k_t)
        } else {
            params.w_pool
        };
        let key_col = tape.transpose(key_row);
        let q_t = if cfg.learned_qk {
            Some(tape.transpose(params.q_pool))
        } else {
            None
        };
        EncoderPass {
            cfg,
            w_t,
            bias: if cfg.compose_bias { params.b_comp } else { None },
            q_t,
            key_col,
            inv_sqrt_d: s::<F>(1.0 / (cfg.d as f64).sqrt()),
        }
    }

    /// Compose a batch of split pairs: `lefts`/`rights` are [r x d] row
    /// matrices; the result is the [r x d] candidate matrix.
    pub fn compose_rows(&self, tape: &mut Tape<F>, lefts: TensorId, rights: TensorId) -> TensorId {
        let cat = tape.concat_last(lefts, rights);
        let mut out = tape.matmul(cat, self.w_t);
        if let Some(b) = self.bias {
            out = tape.add_row_broadcast(out, b);
        }
        if self.cfg.compose_tanh {
            out = tape.tanh(out);
        }
        out
    }

    /// Attention scores for a candidate matrix [r x d] -> [r x 1].
    fn scores(&self, tape: &mut Tape<F>, cands: TensorId) -> TensorId {
        let projected = match self.q_t {
            Some(q_t) => tape.matmul(cands, q_t),
            None => cands,
        };
        let raw = tape.matmul(projected, self.key_col);
        tape.scale(raw, self.inv_sqrt_d)
    }

    /// Pool `groups` cells at once: `cands` is [(groups * k) x d] with the k
    /// candidates of each cell contiguous. Returns the pooled [groups x d]
    /// matrix and the [groups x k] attention weights.
    pub fn pool_groups(
        &self,
        tape: &mut Tape<F>,
        cands: TensorId,
        groups: usize,
        k: usize,
    ) -> (TensorId, TensorId) {
        let scores = self.scores(tape, cands);
        let grouped = tape.reshape(scores, vec![groups, k]);
        let weights = tape.softmax_last(grouped);
        (tape.weighted_sum_groups(weights, cands), weights)
    }
}

/// Eq. "compose": one pair of d-vectors (as [1 x d] rows) into one candidate.
pub fn compose<F: Scalar>(
    tape: &mut Tape<F>,
    left: TensorId,
    right: TensorId,
    params: &EncoderParams,
    cfg: TreeformerConfig,
) -> TensorId {
    let pass = EncoderPass::new(tape, params, cfg);
    pass.compose_rows(tape, left, right)
}

/// Attention pooling over a non-empty candidate list of [1 x d] rows.
pub fn pool<F: Scalar>(
    tape: &mut Tape<F>,
    candidates: &[TensorId],
    params: &EncoderParams,
    cfg: TreeformerConfig,
) -> Result<TensorId> {
    if candidates.is_empty() {
        return Err(Error::contract("pool over empty candidate list"));
    }
    let pass = EncoderPass::new(tape, params, cfg);
    let cands = tape.concat_rows(candidates);
    let (pooled, _) = pass.pool_groups(tape, cands, 1, candidates.len());
    Ok(pooled)
}

fn apply_dropout<F: Scalar>(
    tape: &mut Tape<F>,
    cands: TensorId,
    cfg: &TreeformerConfig,
    hooks: &mut EncodeHooks<'_, F>,
) -> TensorId {
    let Some(rng) = hooks.dropout_rng.as_deref_mut() else {
        return cands;
    };
    if cfg.dropout <= 0.0 {
        return cands;
    }
    let keep = 1.0 - cfg.dropout;
    let n = tape.value(cands).numel();
    let mask: Vec<F> = (0..n)
        .map(|_| {
            if rng.gen_range(0.0..1.0) < keep {
                s::<F>(1.0 / keep)
            } else {
                F::zero()
            }
        })
        .collect();
    tape.dropout(cands, mask)
}

/// Per-cell reference schedule: fills the chart strictly in ascending length
/// order, ascending start index within a length.
pub fn encode_sequential<F: Scalar>(
    tape: &mut Tape<F>,
    token_vectors: &[TensorId],
    cfg: TreeformerConfig,
    params: &EncoderParams,
    mut hooks: EncodeHooks<'_, F>,
) -> Result<SpanChart<TensorId>> {
    if token_vectors.is_empty() {
        return Err(Error::EmptyInput("encode over zero tokens"));
    }
    let n = token_vectors.len();
    let mut chart = SpanChart::new(n, cfg.h_max, cfg.d)?;
    let pass = EncoderPass::new(tape, params, cfg);
    for (i, &t) in token_vectors.iter().enumerate() {
        chart.set(Span::new(i, i), t)?;
        hooks.count(|c| c.cells_written += 1);
    }
    for h in 2..=chart.height() {
        hooks.count(|c| c.level_steps += 1);
        for span in chart.cells_of_length(h)? {
            let mut candidates = Vec::with_capacity(h - 1);
            for (left, right) in split_pairs(span)? {
                let l = *chart.get(left).expect("bottom-up order");
                let r = *chart.get(right).expect("bottom-up order");
                candidates.push(pass.compose_rows(tape, l, r));
                hooks.count(|c| c.compositions += 1);
            }
            let mut cands = tape.concat_rows(&candidates);
            cands = apply_dropout(tape, cands, &cfg, &mut hooks);
            let (pooled, weights) = pass.pool_groups(tape, cands, 1, candidates.len());
            hooks.count(|c| {
                c.pooling_candidate_total += candidates.len() as u64;
                c.cells_written += 1;
            });
            if let Some(trace) = hooks.trace.as_deref_mut() {
                trace.push((span, tape.value(weights).data().to_vec()));
            }
            chart.set(span, pooled)?;
        }
    }
    Ok(chart)
}

/// Level-parallel schedule over a batch: all spans of one length across all
/// sequences become a single batched compose + pool. Numerically equivalent
/// to `encode_sequential` per sequence; padding never enters any cell because
/// each chart is built at its sequence's true length.
pub fn encode_levelwise<F: Scalar>(
    tape: &mut Tape<F>,
    token_vectors_batch: &[Vec<TensorId>],
    cfg: TreeformerConfig,
    params: &EncoderParams,
    mut hooks: EncodeHooks<'_, F>,
) -> Result<Vec<SpanChart<TensorId>>> {
    if token_vectors_batch.is_empty() || token_vectors_batch.iter().any(|t| t.is_empty()) {
        return Err(Error::EmptyInput("encode over zero tokens"));
    }
    let pass = EncoderPass::new(tape, params, cfg);
    let mut charts = Vec::with_capacity(token_vectors_batch.len());
    for tokens in token_vectors_batch {
        let mut chart = SpanChart::new(tokens.len(), cfg.h_max, cfg.d)?;
        for (i, &t) in tokens.iter().enumerate() {
            chart.set(Span::new(i, i), t)?;
            hooks.count(|c| c.cells_written += 1);
        }
        charts.push(chart);
    }
    let max_height = charts.iter().map(|c| c.height()).max().unwrap_or(1);
    for h in 2..=max_height {
        // cells of this length across the batch, each with h-1 candidates
        let mut lefts = Vec::new();
        let mut rights = Vec::new();
        let mut cells: Vec<(usize, Span)> = Vec::new();
        for (seq, chart) in charts.iter().enumerate() {
            if h > chart.height() {
                continue;
            }
            for span in chart.cells_of_length(h)? {
                for (left, right) in split_pairs(span)? {
                    lefts.push(*chart.get(left).expect("bottom-up order"));
                    rights.push(*chart.get(right).expect("bottom-up order"));
                }
                cells.push((seq, span));
            }
        }
        if cells.is_empty() {
            continue;
        }
        hooks.count(|c| c.level_steps += 1);
        let left_m = tape.concat_rows(&lefts);
        let right_m = tape.concat_rows(&rights);
        let mut cands = pass.compose_rows(tape, left_m, right_m);
        cands = apply_dropout(tape, cands, &cfg, &mut hooks);
        let (pooled, weights) = pass.pool_groups(tape, cands, cells.len(), h - 1);
        hooks.count(|c| {
            c.compositions += lefts.len() as u64;
            c.pooling_candidate_total += lefts.len() as u64;
            c.cells_written += cells.len() as u64;
        });
        for (row, &(seq, span)) in cells.iter().enumerate() {
            let cell = tape.slice_row(pooled, row);
            if let Some(trace) = hooks.trace.as_deref_mut() {
                trace.push((span, tape.value(weights).row_slice(row).to_vec()));
            }
            charts[seq].set(span, cell)?;
        }
    }
    Ok(charts)
}

/// Mean of the longest materialized phrase level (the single root cell when
/// the sequence is no longer than the height cap).
pub fn top_level_summary<F: Scalar>(
    tape: &mut Tape<F>,
    chart: &SpanChart<TensorId>,
) -> Result<TensorId> {
    let top = chart.height();
    let cells: Vec<TensorId> = chart
        .flatten(top..=top)?
        .into_iter()
        .map(|(_, &id)| id)
        .collect();
    let stacked = tape.concat_rows(&cells);
    Ok(tape.mean_rows(stacked))
}

/// Copy a chart's cell values off the tape (for dumps and offline checks).
pub fn chart_values<F: Scalar>(
    tape: &Tape<F>,
    chart: &SpanChart<TensorId>,
) -> Result<SpanChart<Vec<F>>> {
    let mut out = SpanChart::new(chart.n(), chart.height(), chart.d())?;
    for h in 1..=chart.height() {
        for span in chart.cells_of_length(h)? {
            if let Some(&id) = chart.get(span) {
                out.set(span, tape.value(id).data().to_vec())?;
            }
        }
    }
    Ok(out)
}
