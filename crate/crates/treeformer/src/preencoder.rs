//! Token pre-encoding before the chart: embedding lookup, sinusoidal
//! positions, and L lightweight self-attention layers. L = 0 degenerates to
//! the bare embedding, which is exactly what the chart consumes in the
//! shallowest configuration.

use crate::error::Result;
use crate::layers::{
    feed_forward, multi_head_attention, residual_norm, sinusoidal_positions, AttnParams,
    DropoutCtx, FfnParams, LnParams,
};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct PreEncoderConfig {
    pub vocab_size: usize,
    pub d: usize,
    /// number of self-attention layers, >= 0
    pub layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// disable to make a token's vector position-independent
    pub positional: bool,
}

#[derive(Clone, Debug)]
pub struct PreLayerParams {
    pub attn: AttnParams,
    pub ln1: LnParams,
    pub ffn: FfnParams,
    pub ln2: LnParams,
}

#[derive(Clone, Debug)]
pub struct PreEncoderParams {
    pub embed: TensorId,
    pub layers: Vec<PreLayerParams>,
}

/// Embedding lookup plus (optionally) sinusoidal positions, [n x d].
pub fn embed<F: Scalar>(
    tape: &mut Tape<F>,
    token_ids: &[usize],
    cfg: &PreEncoderConfig,
    table: TensorId,
) -> Result<TensorId> {
    let x = tape.gather_rows(table, token_ids)?;
    if cfg.positional {
        let pe = tape.constant(sinusoidal_positions(token_ids.len(), cfg.d));
        Ok(tape.add(x, pe))
    } else {
        Ok(x)
    }
}

/// One post-norm transformer encoder layer.
pub fn self_attention_layer<F: Scalar>(
    tape: &mut Tape<F>,
    x: TensorId,
    layer: &PreLayerParams,
    n_heads: usize,
    drop: &mut DropoutCtx<'_>,
) -> TensorId {
    let (attn_out, _) = multi_head_attention(tape, x, x, &layer.attn, n_heads, None);
    let attn_out = drop.apply(tape, attn_out);
    let h = residual_norm(tape, x, attn_out, &layer.ln1);
    let ffn_out = feed_forward(tape, h, &layer.ffn);
    let ffn_out = drop.apply(tape, ffn_out);
    residual_norm(tape, h, ffn_out, &layer.ln2)
}

/// Embed then apply all L layers.
pub fn pre_encode<F: Scalar>(
    tape: &mut Tape<F>,
    token_ids: &[usize],
    cfg: &PreEncoderConfig,
    params: &PreEncoderParams,
    drop: &mut DropoutCtx<'_>,
) -> Result<TensorId> {
    let mut x = embed(tape, token_ids, cfg, params.embed)?;
    for layer in &params.layers {
        x = self_attention_layer(tape, x, layer, cfg.n_heads, drop);
    }
    Ok(x)
}
