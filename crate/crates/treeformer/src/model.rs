//! Model assembly: one canonical named-parameter list per run configuration,
//! binding those tensors onto a tape, and the end-to-end forward passes for
//! the classification and seq2seq tasks. The parameter order defined by
//! `param_specs` is the single source of truth shared by initialization,
//! checkpoints, the optimizer, and gradient checking.

use crate::config::{RunConfig, Task};
use crate::data::{LabeledExample, SeqExample};
use crate::decoder::{
    classify, decode_train_step, encoder_memory, generate_beam, generate_greedy, ClassifierParams,
    DecLayerParams, DecoderConfig, DecoderParams,
};
use crate::encoder::{encode_levelwise, EncodeHooks, EncoderParams, OpCounters, TreeformerConfig};
use crate::error::{Error, Result};
use crate::layers::{AttnParams, DropoutCtx, FfnParams, LnParams};
use crate::preencoder::{pre_encode, PreEncoderConfig, PreEncoderParams, PreLayerParams};
use crate::rng::{self, Prng};
use crate::tensor::gradcheck::{grad_check, GradCheckReport};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::{Scalar, Tensor};
use crate::SpanChart;

pub type ParamSet<F> = Vec<(String, Tensor<F>)>;

pub const N_CLASSES: usize = 2;

pub fn pre_config(run: &RunConfig) -> PreEncoderConfig {
    PreEncoderConfig {
        vocab_size: run.vocab_size(),
        d: run.d,
        layers: run.depth,
        n_heads: run.n_heads,
        d_ffn: run.d_ffn,
        dropout: run.dropout,
        positional: true,
    }
}

pub fn tf_config(run: &RunConfig) -> TreeformerConfig {
    let mut cfg = TreeformerConfig::new(run.d, run.height);
    cfg.dropout = run.dropout;
    cfg
}

pub fn dec_config(run: &RunConfig) -> DecoderConfig {
    DecoderConfig {
        vocab_size: run.vocab_size(),
        d: run.d,
        layers: run.depth_dec,
        n_heads: run.n_heads,
        d_ffn: run.d_ffn,
        max_output_length: run.max_output_length,
        beam_size: run.beam,
        length_penalty: run.length_penalty,
        label_smoothing: run.label_smoothing,
        dropout: run.dropout,
    }
}

enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Weight(usize),
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

fn spec(name: String, rows: usize, cols: usize, init: Init) -> ParamSpec {
    ParamSpec { name, rows, cols, init }
}

fn attn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), d, d, Init::Weight(d)));
    }
}

fn ln_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(spec(format!("{prefix}.gamma"), 1, d, Init::One));
    out.push(spec(format!("{prefix}.beta"), 1, d, Init::Zero));
}

fn ffn_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, d_ffn: usize) {
    out.push(spec(format!("{prefix}.w1"), d_ffn, d, Init::Weight(d)));
    out.push(spec(format!("{prefix}.b1"), 1, d_ffn, Init::Zero));
    out.push(spec(format!("{prefix}.w2"), d, d_ffn, Init::Weight(d_ffn)));
    out.push(spec(format!("{prefix}.b2"), 1, d, Init::Zero));
}

fn param_specs(run: &RunConfig) -> Vec<ParamSpec> {
    let d = run.d;
    let v = run.vocab_size();
    let mut out = Vec::new();
    out.push(spec("embed".into(), v, d, Init::Weight(d)));
    for i in 0..run.depth {
        attn_specs(&mut out, &format!("pre.l{i}.attn"), d);
        ln_specs(&mut out, &format!("pre.l{i}.ln1"), d);
        ffn_specs(&mut out, &format!("pre.l{i}.ffn"), d, run.d_ffn);
        ln_specs(&mut out, &format!("pre.l{i}.ln2"), d);
    }
    out.push(spec("tf.w_comp".into(), d, 2 * d, Init::Weight(2 * d)));
    out.push(spec("tf.b_comp".into(), 1, d, Init::Zero));
    out.push(spec("tf.w_pool".into(), 1, d, Init::Weight(d)));
    out.push(spec("tf.q_pool".into(), d, d, Init::Weight(d)));
    out.push(spec("tf.k_pool".into(), d, d, Init::Weight(d)));
    match run.task {
        Task::Dyck => {
            out.push(spec("cls.w".into(), N_CLASSES, d, Init::Weight(d)));
            out.push(spec("cls.b".into(), 1, N_CLASSES, Init::Zero));
        }
        Task::Copy | Task::Reverse => {
            for i in 0..run.depth_dec {
                attn_specs(&mut out, &format!("dec.l{i}.self"), d);
                ln_specs(&mut out, &format!("dec.l{i}.ln1"), d);
                attn_specs(&mut out, &format!("dec.l{i}.cross"), d);
                ln_specs(&mut out, &format!("dec.l{i}.ln2"), d);
                ffn_specs(&mut out, &format!("dec.l{i}.ffn"), d, run.d_ffn);
                ln_specs(&mut out, &format!("dec.l{i}.ln3"), d);
            }
            out.push(spec("dec.out.w".into(), v, d, Init::Weight(d)));
            out.push(spec("dec.out.b".into(), 1, v, Init::Zero));
        }
    }
    out
}

pub fn param_names(run: &RunConfig) -> Vec<String> {
    param_specs(run).into_iter().map(|s| s.name).collect()
}

/// Fresh parameters for a run, in canonical order.
pub fn init_params<F: Scalar>(run: &RunConfig, seed: u64) -> ParamSet<F> {
    let mut r = rng::seeded(seed);
    param_specs(run)
        .into_iter()
        .map(|sp| {
            let n = sp.rows * sp.cols;
            let data: Vec<F> = match sp.init {
                Init::Weight(fan_in) => rng::init_weight(&mut r, fan_in, n),
                Init::Zero => vec![F::zero(); n],
                Init::One => vec![F::one(); n],
            };
            (sp.name, Tensor::matrix(sp.rows, sp.cols, data))
        })
        .collect()
}

/// Load checkpoint tensors into canonical order, verifying names and shapes.
pub fn params_from_named<F: Scalar>(
    run: &RunConfig,
    named: Vec<(String, Tensor<f32>)>,
) -> Result<ParamSet<F>> {
    let specs = param_specs(run);
    if named.len() != specs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, config expects {}",
            named.len(),
            specs.len()
        )));
    }
    specs
        .iter()
        .zip(named)
        .map(|(sp, (name, t))| {
            if name != sp.name {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} where {:?} was expected",
                    sp.name
                )));
            }
            if t.shape() != [sp.rows, sp.cols] {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, expected [{}, {}]",
                    t.shape(),
                    sp.rows,
                    sp.cols
                )));
            }
            Ok((name, t.cast()))
        })
        .collect()
}

/// Tape handles for every sub-module, produced by `bind`.
pub struct Bound {
    pub pre: PreEncoderParams,
    pub enc: EncoderParams,
    pub cls: Option<ClassifierParams>,
    pub dec: Option<DecoderParams>,
}

struct Cursor<'a> {
    ids: &'a [TensorId],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> TensorId {
        let id = self.ids[self.pos];
        self.pos += 1;
        id
    }

    fn attn(&mut self) -> AttnParams {
        AttnParams { wq: self.next(), wk: self.next(), wv: self.next(), wo: self.next() }
    }

    fn ln(&mut self) -> LnParams {
        LnParams { gamma: self.next(), beta: self.next() }
    }

    fn ffn(&mut self) -> FfnParams {
        FfnParams { w1: self.next(), b1: self.next(), w2: self.next(), b2: self.next() }
    }
}

/// Map leaf ids (in canonical order) onto the per-module parameter structs.
pub fn assemble(run: &RunConfig, ids: &[TensorId]) -> Result<Bound> {
    let expect = param_specs(run).len();
    if ids.len() != expect {
        return Err(Error::contract(format!(
            "assemble got {} tensors, config expects {expect}",
            ids.len()
        )));
    }
    let mut c = Cursor { ids, pos: 0 };
    let embed = c.next();
    let pre_layers = (0..run.depth)
        .map(|_| PreLayerParams { attn: c.attn(), ln1: c.ln(), ffn: c.ffn(), ln2: c.ln() })
        .collect();
    let enc = EncoderParams {
        w_comp: c.next(),
        b_comp: Some(c.next()),
        w_pool: c.next(),
        q_pool: c.next(),
        k_pool: c.next(),
    };
    let (cls, dec) = match run.task {
        Task::Dyck => {
            let cls = ClassifierParams { w: c.next(), b: c.next() };
            (Some(cls), None)
        }
        Task::Copy | Task::Reverse => {
            let layers = (0..run.depth_dec)
                .map(|_| DecLayerParams {
                    self_attn: c.attn(),
                    ln1: c.ln(),
                    cross_attn: c.attn(),
                    ln2: c.ln(),
                    ffn: c.ffn(),
                    ln3: c.ln(),
                })
                .collect();
            let dec = DecoderParams { embed, layers, out_w: c.next(), out_b: c.next() };
            (None, Some(dec))
        }
    };
    debug_assert_eq!(c.pos, ids.len());
    Ok(Bound { pre: PreEncoderParams { embed, layers: pre_layers }, enc, cls, dec })
}

/// Put every parameter on the tape as a leaf and assemble the module structs.
pub fn bind<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ParamSet<F>,
    run: &RunConfig,
    trainable: bool,
) -> Result<(Vec<TensorId>, Bound)> {
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), trainable))
        .collect();
    let bound = assemble(run, &ids)?;
    Ok((ids, bound))
}

fn drop_ctx<'a>(run: &RunConfig, rng: Option<&'a mut Prng>) -> DropoutCtx<'a> {
    DropoutCtx { p: run.dropout, rng }
}

/// Pre-encode each sequence and fill its chart (level-parallel across the
/// batch).
pub fn encode_batch<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    run: &RunConfig,
    token_batch: &[&[usize]],
    mut rng: Option<&mut Prng>,
    counters: Option<&mut OpCounters>,
) -> Result<Vec<SpanChart<TensorId>>> {
    let pre_cfg = pre_config(run);
    let mut rows_batch = Vec::with_capacity(token_batch.len());
    for &tokens in token_batch {
        let mut drop = drop_ctx(run, rng.as_deref_mut());
        let mat = pre_encode(tape, tokens, &pre_cfg, &bound.pre, &mut drop)?;
        let rows: Vec<TensorId> = (0..tokens.len()).map(|i| tape.slice_row(mat, i)).collect();
        rows_batch.push(rows);
    }
    let hooks = EncodeHooks {
        counters,
        trace: None,
        dropout_rng: rng,
    };
    encode_levelwise(tape, &rows_batch, tf_config(run), &bound.enc, hooks)
}

/// [batch x 2] classification logits.
pub fn classification_logits<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    run: &RunConfig,
    token_batch: &[&[usize]],
    rng: Option<&mut Prng>,
) -> Result<TensorId> {
    let cls = bound
        .cls
        .as_ref()
        .ok_or_else(|| Error::contract("classification forward on a seq2seq config"))?;
    let charts = encode_batch(tape, bound, run, token_batch, rng, None)?;
    let per_example: Vec<TensorId> = charts
        .iter()
        .map(|chart| classify(tape, chart, cls, run.height > 1))
        .collect::<Result<_>>()?;
    Ok(tape.concat_rows(&per_example))
}

/// Mean cross-entropy over a classification batch (no label smoothing; the
/// smoothing knob is for the seq2seq vocabulary loss).
pub fn classification_loss<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    run: &RunConfig,
    examples: &[LabeledExample],
    rng: Option<&mut Prng>,
) -> Result<TensorId> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("classification batch"));
    }
    let tokens: Vec<&[usize]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
    let logits = classification_logits(tape, bound, run, &tokens, rng)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    tape.cross_entropy(logits, &labels, F::zero())
}

/// Mean teacher-forced loss over a seq2seq batch.
pub fn seq2seq_loss<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    run: &RunConfig,
    examples: &[SeqExample],
    mut rng: Option<&mut Prng>,
) -> Result<TensorId> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("seq2seq batch"));
    }
    let dec = bound
        .dec
        .as_ref()
        .ok_or_else(|| Error::contract("seq2seq forward on a classification config"))?;
    let cfg = dec_config(run);
    let sources: Vec<&[usize]> = examples.iter().map(|e| e.source.as_slice()).collect();
    let charts = encode_batch(tape, bound, run, &sources, rng.as_deref_mut(), None)?;
    let mut total: Option<TensorId> = None;
    for (chart, ex) in charts.iter().zip(examples) {
        let memory = encoder_memory(tape, chart)?;
        let mut drop = drop_ctx(run, rng.as_deref_mut());
        let loss = decode_train_step(tape, memory, &ex.target, &cfg, dec, &mut drop)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss),
            None => loss,
        });
    }
    Ok(tape.scale(total.unwrap(), crate::tensor::s::<F>(1.0 / examples.len() as f64)))
}

/// Decode one source sequence; beam <= 1 is greedy.
pub fn generate<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &Bound,
    run: &RunConfig,
    source: &[usize],
    beam: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    let dec = bound
        .dec
        .as_ref()
        .ok_or_else(|| Error::contract("generation on a classification config"))?;
    let cfg = dec_config(run);
    let charts = encode_batch(tape, bound, run, &[source], None, None)?;
    let memory = encoder_memory(tape, &charts[0])?;
    if beam <= 1 {
        generate_greedy(tape, memory, &cfg, dec)
    } else {
        generate_beam(tape, memory, &cfg, dec, beam, length_penalty)
    }
}

/// Fixed tiny batch used by the end-to-end gradient check; deterministic in
/// the seed, never includes dropout.
fn gradcheck_examples(run: &RunConfig, seed: u64) -> (Vec<LabeledExample>, Vec<SeqExample>) {
    let mut r = rng::substream(seed, 0xeca);
    match run.task {
        Task::Dyck => (crate::data::gen_dyck(&mut r, 2, 4, run.max_len.min(6)), Vec::new()),
        Task::Copy | Task::Reverse => (
            Vec::new(),
            crate::data::gen_copy_reverse(
                &mut r,
                2,
                2,
                run.max_len.min(4),
                run.alphabet,
                run.task == Task::Reverse,
            ),
        ),
    }
}

fn gradcheck_loss<F: Scalar>(
    run: &RunConfig,
    cls_batch: &[LabeledExample],
    seq_batch: &[SeqExample],
    tape: &mut Tape<F>,
    ids: &[TensorId],
    mutate: bool,
) -> Result<TensorId> {
    let mut ids = ids.to_vec();
    if mutate {
        // test-only corruption of the composition weight's backward pass
        let idx = param_names(run).iter().position(|n| n == "tf.w_comp").unwrap();
        ids[idx] = tape.neg_grad_identity(ids[idx]);
    }
    let bound = assemble(run, &ids)?;
    if run.task == Task::Dyck {
        classification_loss(tape, &bound, run, cls_batch, None)
    } else {
        seq2seq_loss(tape, &bound, run, seq_batch, None)
    }
}

/// End-to-end finite-difference check through pre-encoder, chart, and head.
/// `A` is the precision under test; the numeric oracle runs in `N`.
/// `mutate` flips one primitive's backward pass to prove the check can fail.
pub fn gradcheck_model<A: Scalar, N: Scalar>(
    run: &RunConfig,
    seed: u64,
    step: f64,
    denom_floor: f64,
    mutate: bool,
) -> Result<GradCheckReport> {
    if run.d > 16 || run.max_len > 8 {
        return Err(Error::contract(
            "gradient check requires a tiny config (d <= 16, lengths <= 8)",
        ));
    }
    let params: ParamSet<A> = init_params(run, seed);
    let (cls_a, seq_a) = gradcheck_examples(run, seed);
    let (cls_n, seq_n) = (cls_a.clone(), seq_a.clone());
    let run_a = run.clone();
    let run_n = run.clone();
    let analytic = move |tape: &mut Tape<A>, ids: &[TensorId]| {
        gradcheck_loss(&run_a, &cls_a, &seq_a, tape, ids, mutate)
    };
    let numeric = move |tape: &mut Tape<N>, ids: &[TensorId]| {
        gradcheck_loss(&run_n, &cls_n, &seq_n, tape, ids, false)
    };
    grad_check::<A, N>(&params, &analytic, &numeric, step, denom_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> RunConfig {
        let mut run = RunConfig::default();
        run.task = task;
        run.d = 8;
        run.n_heads = 2;
        run.d_ffn = 16;
        run.height = 3;
        run.depth = 1;
        run.depth_dec = 1;
        run.max_len = 6;
        run.min_len = if task == Task::Dyck { 4 } else { 2 };
        run.max_output_length = 8;
        run.dropout = 0.0;
        run
    }

    #[test]
    fn names_are_unique_and_match_init() {
        for task in [Task::Dyck, Task::Copy] {
            let run = tiny(task);
            let names = param_names(&run);
            let mut dedup = names.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), names.len());
            let params: ParamSet<f32> = init_params(&run, 1);
            let got: Vec<&String> = params.iter().map(|(n, _)| n).collect();
            assert_eq!(got, names.iter().collect::<Vec<_>>());
        }
    }

    #[test]
    fn bind_consumes_every_parameter() {
        for task in [Task::Dyck, Task::Reverse] {
            let run = tiny(task);
            let params: ParamSet<f32> = init_params(&run, 2);
            let mut tape = Tape::<f32>::new();
            let (ids, bound) = bind(&mut tape, &params, &run, true).unwrap();
            assert_eq!(ids.len(), params.len());
            assert_eq!(bound.cls.is_some(), task == Task::Dyck);
            assert_eq!(bound.dec.is_some(), task != Task::Dyck);
            assert_eq!(bound.pre.layers.len(), run.depth);
        }
    }

    #[test]
    fn classification_forward_shapes_and_determinism() {
        let run = tiny(Task::Dyck);
        let params: ParamSet<f32> = init_params(&run, 3);
        let go = || {
            let mut tape = Tape::<f32>::new();
            let (_, bound) = bind(&mut tape, &params, &run, false).unwrap();
            let batch: Vec<&[usize]> = vec![&[3, 4, 5, 6], &[3, 4]];
            let logits = classification_logits(&mut tape, &bound, &run, &batch, None).unwrap();
            assert_eq!(tape.value(logits).shape(), &[2, N_CLASSES]);
            tape.value(logits).data().to_vec()
        };
        assert_eq!(go(), go());
    }

    #[test]
    fn seq2seq_loss_is_finite_and_backpropagates() {
        let run = tiny(Task::Copy);
        let params: ParamSet<f32> = init_params(&run, 4);
        let mut r = rng::seeded(5);
        let batch = crate::data::gen_copy_reverse(&mut r, 3, 2, 4, run.alphabet, false);
        let mut tape = Tape::<f32>::new();
        let (ids, bound) = bind(&mut tape, &params, &run, true).unwrap();
        let loss = seq2seq_loss(&mut tape, &bound, &run, &batch, None).unwrap();
        assert!(tape.value(loss).item().is_finite());
        tape.backward(loss).unwrap();
        let embed_grad = tape.grad(ids[0]).expect("embedding must receive gradient");
        assert!(embed_grad.max_abs() > 0.0);
    }

    #[test]
    fn checkpoint_named_round_trip_through_model() {
        let run = tiny(Task::Dyck);
        let params: ParamSet<f32> = init_params(&run, 6);
        let restored = params_from_named::<f32>(&run, params.clone()).unwrap();
        assert_eq!(restored, params);

        let mut wrong = params.clone();
        wrong.swap(0, 1);
        assert!(params_from_named::<f32>(&run, wrong).is_err());

        let mut short = params;
        short.pop();
        assert!(params_from_named::<f32>(&run, short).is_err());
    }

    #[test]
    fn height_one_baseline_still_classifies() {
        let mut run = tiny(Task::Dyck);
        run.height = 1;
        let params: ParamSet<f32> = init_params(&run, 7);
        let mut tape = Tape::<f32>::new();
        let (_, bound) = bind(&mut tape, &params, &run, false).unwrap();
        let logits =
            classification_logits(&mut tape, &bound, &run, &[&[3, 4, 3, 4]], None).unwrap();
        assert!(tape.value(logits).all_finite());
    }

    #[test]
    fn gradcheck_rejects_non_tiny_config() {
        let mut run = tiny(Task::Dyck);
        run.d = 32;
        assert!(gradcheck_model::<f64, f64>(&run, 1, 1e-6, 1e-8, false).is_err());
    }

    #[test]
    fn generation_emits_tokens_within_vocab() {
        let run = tiny(Task::Copy);
        let params: ParamSet<f32> = init_params(&run, 8);
        let mut tape = Tape::<f32>::new();
        let (_, bound) = bind(&mut tape, &params, &run, false).unwrap();
        for beam in [1, 3] {
            let out = generate(&mut tape, &bound, &run, &[3, 4, 5], beam, 0.0).unwrap();
            assert!(out.len() <= run.max_output_length);
            assert!(out.iter().all(|&t| t < run.vocab_size()));
        }
    }
}
