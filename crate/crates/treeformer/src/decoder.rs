//! Toy autoregressive decoder that cross-attends over flattened chart cells,
//! plus the classification readout. The cross-attention memory is the whole
//! truncated chart (token cells first, then phrases ascending by length), so
//! its length is exactly the chart cell-count formula.

use crate::chart::SpanChart;
use crate::data::{BOS_ID, EOS_ID};
use crate::encoder::top_level_summary;
use crate::error::{Error, Result};
use crate::layers::{
    causal_mask, feed_forward, multi_head_attention, residual_norm, sinusoidal_positions,
    AttnParams, DropoutCtx, FfnParams, LnParams,
};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{s, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    pub layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_output_length: usize,
    pub beam_size: usize,
    pub length_penalty: f64,
    pub label_smoothing: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct DecLayerParams {
    pub self_attn: AttnParams,
    pub ln1: LnParams,
    pub cross_attn: AttnParams,
    pub ln2: LnParams,
    pub ffn: FfnParams,
    pub ln3: LnParams,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embed: TensorId,
    pub layers: Vec<DecLayerParams>,
    /// output projection [vocab x d] and bias [1 x vocab]
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// Build the decoder memory from a completed chart: every cell, token level
/// first, phrases ascending by length.
pub fn encoder_memory<F: Scalar>(
    tape: &mut Tape<F>,
    chart: &SpanChart<TensorId>,
) -> Result<TensorId> {
    let cells: Vec<TensorId> = chart.flatten_all()?.into_iter().map(|(_, &id)| id).collect();
    Ok(tape.concat_rows(&cells))
}

/// Decoder stack over an already-shifted input prefix; returns [T x d].
fn decoder_states<F: Scalar>(
    tape: &mut Tape<F>,
    input_ids: &[usize],
    memory: TensorId,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    drop: &mut DropoutCtx<'_>,
) -> Result<TensorId> {
    let mut x = tape.gather_rows(params.embed, input_ids)?;
    let pe = tape.constant(sinusoidal_positions(input_ids.len(), cfg.d));
    x = tape.add(x, pe);
    let mask = causal_mask::<F>(tape, input_ids.len());
    for layer in &params.layers {
        let (self_out, _) =
            multi_head_attention(tape, x, x, &layer.self_attn, cfg.n_heads, Some(mask));
        let self_out = drop.apply(tape, self_out);
        let h = residual_norm(tape, x, self_out, &layer.ln1);
        let (cross_out, _) =
            multi_head_attention(tape, h, memory, &layer.cross_attn, cfg.n_heads, None);
        let cross_out = drop.apply(tape, cross_out);
        let h2 = residual_norm(tape, h, cross_out, &layer.ln2);
        let ffn_out = feed_forward(tape, h2, &layer.ffn);
        let ffn_out = drop.apply(tape, ffn_out);
        x = residual_norm(tape, h2, ffn_out, &layer.ln3);
    }
    Ok(x)
}

fn output_logits<F: Scalar>(
    tape: &mut Tape<F>,
    states: TensorId,
    params: &DecoderParams,
) -> TensorId {
    let w_t = tape.transpose(params.out_w);
    let raw = tape.matmul(states, w_t);
    tape.add_row_broadcast(raw, params.out_b)
}

/// Teacher-forced training loss. `target_ids` is the full wrapped sequence
/// (bos ... eos); the loss is over predicting positions 1.. from 0..len-1.
pub fn decode_train_step<F: Scalar>(
    tape: &mut Tape<F>,
    memory: TensorId,
    target_ids: &[usize],
    cfg: &DecoderConfig,
    params: &DecoderParams,
    drop: &mut DropoutCtx<'_>,
) -> Result<TensorId> {
    if target_ids.len() < 2 {
        return Err(Error::contract(
            "decode_train_step target must contain at least bos and one symbol",
        ));
    }
    let payload = target_ids.len() - 2;
    if payload > cfg.max_output_length {
        return Err(Error::contract(format!(
            "target payload length {payload} exceeds max_output_length {}",
            cfg.max_output_length
        )));
    }
    let input = &target_ids[..target_ids.len() - 1];
    let predict = &target_ids[1..];
    let states = decoder_states(tape, input, memory, cfg, params, drop)?;
    let logits = output_logits(tape, states, params);
    tape.cross_entropy(logits, predict, s::<F>(cfg.label_smoothing))
}

/// Logits for the next token after `prefix` (which must start with bos).
pub fn next_token_logits<F: Scalar>(
    tape: &mut Tape<F>,
    memory: TensorId,
    prefix: &[usize],
    cfg: &DecoderConfig,
    params: &DecoderParams,
) -> Result<Vec<F>> {
    let states = decoder_states(
        tape,
        prefix,
        memory,
        cfg,
        params,
        &mut DropoutCtx::disabled(),
    )?;
    let logits = output_logits(tape, states, params);
    Ok(tape.value(logits).row_slice(prefix.len() - 1).to_vec())
}

fn log_softmax_f64<F: Scalar>(logits: &[F]) -> Vec<f64> {
    let vals: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + vals.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    vals.iter().map(|x| x - lse).collect()
}

/// Length-normalized score: logP / len^alpha (alpha = 0 leaves the raw sum).
fn normalized(logprob: f64, len: usize, alpha: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(alpha)
}

/// Generic length-normalized beam search over a next-token scoring function.
/// `step` receives the full prefix including bos and returns raw logits.
/// Returns the payload of the best completed hypothesis (no bos/eos).
pub fn beam_search_with<F: Scalar>(
    mut step: impl FnMut(&[usize]) -> Vec<F>,
    max_len: usize,
    beam_size: usize,
    length_penalty: f64,
) -> Vec<usize> {
    assert!(beam_size >= 1, "beam_size must be >= 1");
    struct Hyp {
        tokens: Vec<usize>,
        logprob: f64,
    }
    let mut live = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut completed: Vec<(Vec<usize>, f64)> = Vec::new();
    for _ in 0..max_len {
        let mut expansions: Vec<(usize, usize, f64)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&hyp.tokens);
            let logp = log_softmax_f64(&step(&prefix));
            for (tok, &lp) in logp.iter().enumerate() {
                expansions.push((hi, tok, hyp.logprob + lp));
            }
        }
        expansions.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
        expansions.truncate(beam_size);
        let mut next = Vec::with_capacity(beam_size);
        for (hi, tok, lp) in expansions {
            let mut tokens = live[hi].tokens.clone();
            if tok == EOS_ID {
                completed.push((tokens, normalized(lp, live[hi].tokens.len() + 1, length_penalty)));
            } else {
                tokens.push(tok);
                next.push(Hyp { tokens, logprob: lp });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    // hypotheses that hit the length limit without eos still compete
    for hyp in live {
        let len = hyp.tokens.len();
        completed.push((hyp.tokens, normalized(hyp.logprob, len, length_penalty)));
    }
    completed
        .into_iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(tokens, _)| tokens)
        .unwrap_or_default()
}

/// Argmax decoding until eos or the length cap.
pub fn generate_greedy<F: Scalar>(
    tape: &mut Tape<F>,
    memory: TensorId,
    cfg: &DecoderConfig,
    params: &DecoderParams,
) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS_ID];
    let mut out = Vec::new();
    for _ in 0..cfg.max_output_length {
        let logits = next_token_logits(tape, memory, &prefix, cfg, params)?;
        let tok = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap();
        if tok == EOS_ID {
            break;
        }
        out.push(tok);
        prefix.push(tok);
    }
    Ok(out)
}

/// Beam decoding with the config's (or overridden) width and penalty.
pub fn generate_beam<F: Scalar>(
    tape: &mut Tape<F>,
    memory: TensorId,
    cfg: &DecoderConfig,
    params: &DecoderParams,
    beam_size: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    let mut err = None;
    let out = beam_search_with::<F>(
        |prefix| match next_token_logits(tape, memory, prefix, cfg, params) {
            Ok(l) => l,
            Err(e) => {
                err = Some(e);
                vec![F::zero(); cfg.vocab_size]
            }
        },
        cfg.max_output_length,
        beam_size,
        length_penalty,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    /// projection [classes x d] and bias [1 x classes]
    pub w: TensorId,
    pub b: TensorId,
}

/// Classification logits: Linear(token-mean + top-level summary). The
/// token-mean is the pooler stand-in; `use_summary = false` ablates the
/// phrase path.
pub fn classify<F: Scalar>(
    tape: &mut Tape<F>,
    chart: &SpanChart<TensorId>,
    params: &ClassifierParams,
    use_summary: bool,
) -> Result<TensorId> {
    let tokens: Vec<TensorId> = chart.flatten(1..=1)?.into_iter().map(|(_, &id)| id).collect();
    let stacked = tape.concat_rows(&tokens);
    let mut sentence = tape.mean_rows(stacked);
    if use_summary {
        let summary = top_level_summary(tape, chart)?;
        sentence = tape.add(sentence, summary);
    }
    let w_t = tape.transpose(params.w);
    let raw = tape.matmul(sentence, w_t);
    Ok(tape.add_row_broadcast(raw, params.b))
}
