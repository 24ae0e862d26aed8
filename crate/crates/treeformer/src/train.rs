//! Training and evaluation harness: minibatch loop with a fresh tape per
//! step, periodic validation, best-by-validation parameter retention, and
//! NaN-divergence abort that keeps the last good parameters.

use crate::config::{RunConfig, Task};
use crate::data::{self, LabeledExample, SeqExample};
use crate::error::{Error, Result};
use crate::model::{
    bind, classification_logits, classification_loss, init_params, seq2seq_loss, ParamSet,
};
use crate::rng;
use crate::tensor::optim::{OptimConfig, OptimKind, Optimizer, Schedule};
use crate::tensor::tape::Tape;
use crate::tensor::{Scalar, Tensor};
use rand::Rng;

pub fn optim_config(run: &RunConfig) -> OptimConfig {
    OptimConfig {
        kind: match run.optimizer.as_str() {
            "sgd" => OptimKind::Sgd,
            _ => OptimKind::adam_default(),
        },
        lr: run.lr,
        schedule: match run.schedule.as_str() {
            "constant" => Schedule::Constant,
            _ => Schedule::InverseSqrt { warmup_steps: run.warmup_steps },
        },
        weight_decay: run.weight_decay,
    }
}

/// Train/validation splits for whichever task the config selects.
#[derive(Clone, Debug)]
pub enum TaskData {
    Cls { train: Vec<LabeledExample>, val: Vec<LabeledExample> },
    Seq { train: Vec<SeqExample>, val: Vec<SeqExample> },
}

impl TaskData {
    pub fn train_len(&self) -> usize {
        match self {
            TaskData::Cls { train, .. } => train.len(),
            TaskData::Seq { train, .. } => train.len(),
        }
    }
}

/// Generate both splits from the run seed (independent substreams).
pub fn make_data(run: &RunConfig) -> TaskData {
    let mut tr = rng::substream(run.seed, 1);
    let mut va = rng::substream(run.seed, 2);
    match run.task {
        Task::Dyck => TaskData::Cls {
            train: data::gen_dyck(&mut tr, run.train_count, run.min_len, run.max_len),
            val: data::gen_dyck(&mut va, run.val_count, run.min_len, run.max_len),
        },
        Task::Copy | Task::Reverse => {
            let rev = run.task == Task::Reverse;
            TaskData::Seq {
                train: data::gen_copy_reverse(
                    &mut tr, run.train_count, run.min_len, run.max_len, run.alphabet, rev,
                ),
                val: data::gen_copy_reverse(
                    &mut va, run.val_count, run.min_len, run.max_len, run.alphabet, rev,
                ),
            }
        }
    }
}

/// Reconstruct examples from dataset-file rows (source tokens, target field).
pub fn task_data_from_rows(
    run: &RunConfig,
    train: Vec<(Vec<usize>, Vec<usize>)>,
    val: Vec<(Vec<usize>, Vec<usize>)>,
) -> Result<TaskData> {
    let vocab = run.vocab_size();
    let check = |rows: &[(Vec<usize>, Vec<usize>)]| -> Result<()> {
        for (src, _) in rows {
            if let Some(&t) = src.iter().find(|&&t| t >= vocab) {
                return Err(Error::Dataset(format!(
                    "token id {t} outside the task vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    };
    check(&train)?;
    check(&val)?;
    let to_cls = |rows: Vec<(Vec<usize>, Vec<usize>)>| -> Result<Vec<LabeledExample>> {
        rows.into_iter()
            .map(|(tokens, tgt)| {
                if tgt.len() != 1 || tgt[0] > 1 {
                    return Err(Error::Dataset("classification target must be 0 or 1".into()));
                }
                Ok(LabeledExample { tokens, label: tgt[0] })
            })
            .collect()
    };
    let to_seq = |rows: Vec<(Vec<usize>, Vec<usize>)>| -> Result<Vec<SeqExample>> {
        rows.into_iter()
            .map(|(source, payload)| {
                if payload.iter().any(|&t| t >= vocab) {
                    return Err(Error::Dataset("target token outside vocabulary".into()));
                }
                let mut target = vec![data::BOS_ID];
                target.extend(payload);
                target.push(data::EOS_ID);
                Ok(SeqExample { source, target })
            })
            .collect()
    };
    Ok(match run.task {
        Task::Dyck => TaskData::Cls { train: to_cls(train)?, val: to_cls(val)? },
        _ => TaskData::Seq { train: to_seq(train)?, val: to_seq(val)? },
    })
}

#[derive(Clone, Copy, Debug)]
pub struct LogEntry {
    pub step: usize,
    pub train_loss: f64,
    pub val_metric: f64,
}

pub struct TrainOutcome<F: Scalar> {
    /// best-by-validation parameters (ties broken by earlier step)
    pub params: ParamSet<F>,
    pub best_metric: f64,
    pub best_step: usize,
    pub history: Vec<LogEntry>,
    pub diverged: bool,
}

const EVAL_CHUNK: usize = 32;

/// Accuracy of argmax classification over a labeled set.
pub fn classification_accuracy<F: Scalar>(
    run: &RunConfig,
    params: &ParamSet<F>,
    examples: &[LabeledExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(EVAL_CHUNK) {
        let mut tape = Tape::<F>::new();
        let (_, bound) = bind(&mut tape, params, run, false)?;
        let tokens: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let logits = classification_logits(&mut tape, &bound, run, &tokens, None)?;
        let v = tape.value(logits);
        for (row, ex) in chunk.iter().enumerate() {
            let scores = v.row_slice(row);
            let pred = if scores[1] > scores[0] { 1 } else { 0 };
            if pred == ex.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Exact-sequence-match rate of decoded outputs against target payloads.
pub fn exact_match<F: Scalar>(
    run: &RunConfig,
    params: &ParamSet<F>,
    examples: &[SeqExample],
    beam: usize,
    length_penalty: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut hits = 0usize;
    for ex in examples {
        let mut tape = Tape::<F>::new();
        let (_, bound) = bind(&mut tape, params, run, false)?;
        let out = crate::model::generate(&mut tape, &bound, run, &ex.source, beam, length_penalty)?;
        if out == ex.target[1..ex.target.len() - 1] {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Task metric on the validation split.
pub fn evaluate<F: Scalar>(
    run: &RunConfig,
    params: &ParamSet<F>,
    data: &TaskData,
    beam: usize,
    length_penalty: f64,
) -> Result<f64> {
    match data {
        TaskData::Cls { val, .. } => classification_accuracy(run, params, val),
        TaskData::Seq { val, .. } => exact_match(run, params, val, beam, length_penalty),
    }
}

/// Run the training loop; `on_log` fires once per validation point.
pub fn train<F: Scalar>(
    run: &RunConfig,
    data: &TaskData,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome<F>> {
    run.validate()?;
    if data.train_len() == 0 {
        return Err(Error::EmptyInput("training set"));
    }
    let mut params: ParamSet<F> = init_params(run, rng::substream_seed(run.seed, 10));
    let mut opt: Optimizer<F> = Optimizer::new(optim_config(run));
    let mut batch_rng = rng::substream(run.seed, 11);
    let mut dropout_rng = rng::substream(run.seed, 12);

    let mut best: Option<(f64, usize, ParamSet<F>)> = None;
    let mut history = Vec::new();
    let mut diverged = false;

    'steps: for step in 1..=run.max_steps {
        let idxs: Vec<usize> = (0..run.batch_size)
            .map(|_| batch_rng.gen_range(0..data.train_len()))
            .collect();
        let mut tape = Tape::<F>::new();
        let (ids, bound) = bind(&mut tape, &params, run, true)?;
        let drng = (run.dropout > 0.0).then_some(&mut dropout_rng);
        let loss = match data {
            TaskData::Cls { train, .. } => {
                let batch: Vec<LabeledExample> = idxs.iter().map(|&i| train[i].clone()).collect();
                classification_loss(&mut tape, &bound, run, &batch, drng)?
            }
            TaskData::Seq { train, .. } => {
                let batch: Vec<SeqExample> = idxs.iter().map(|&i| train[i].clone()).collect();
                seq2seq_loss(&mut tape, &bound, run, &batch, drng)?
            }
        };
        let loss_val = tape.value(loss).item().as_f64();
        if !loss_val.is_finite() {
            diverged = true;
            break 'steps;
        }
        tape.backward(loss)?;
        let mut grads: Vec<Option<Tensor<F>>> =
            ids.iter().map(|&id| tape.grad(id).cloned()).collect();
        drop(tape);
        if opt.step(&mut params, &mut grads).is_err() {
            // non-finite gradient; params are untouched, stop here
            diverged = true;
            break 'steps;
        }

        if step % run.eval_every == 0 || step == run.max_steps {
            let metric = evaluate(run, &params, data, run.beam, run.length_penalty)?;
            let entry = LogEntry { step, train_loss: loss_val, val_metric: metric };
            on_log(&entry);
            history.push(entry);
            let better = best.as_ref().map(|(m, _, _)| metric > *m).unwrap_or(true);
            if better {
                best = Some((metric, step, params.clone()));
            }
        }
    }

    let (best_metric, best_step, best_params) = match best {
        Some(b) => b,
        // divergence before the first validation point: keep the last good
        // parameters without a metric claim
        None => (f64::NAN, 0, params),
    };
    Ok(TrainOutcome {
        params: best_params,
        best_metric,
        best_step,
        history,
        diverged,
    })
}
