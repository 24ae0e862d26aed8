//! Run configuration: defaults, flat `key = value` config files, and the
//! echo string embedded in checkpoints and dataset headers. Precedence is
//! CLI flag > config file > default, applied in that order by the CLI.

use crate::error::{Error, Result};
use std::fmt;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Dyck-2 well-formedness classification
    Dyck,
    /// seq2seq copy
    Copy,
    /// seq2seq reversal
    Reverse,
}

impl Task {
    pub fn is_seq2seq(self) -> bool {
        !matches!(self, Task::Dyck)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Dyck => "dyck",
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    // model
    pub d: usize,
    pub height: usize,
    pub depth: usize,
    pub depth_dec: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    // optimizer
    pub optimizer: String,
    pub lr: f64,
    pub schedule: String,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    // loop
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    // decoding
    pub beam: usize,
    pub length_penalty: f64,
    pub max_output_length: usize,
    // data
    pub train_count: usize,
    pub val_count: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alphabet: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Dyck,
            d: 32,
            height: 6,
            depth: 1,
            depth_dec: 2,
            n_heads: 4,
            d_ffn: 64,
            dropout: 0.0,
            optimizer: "adam".into(),
            lr: 5e-3,
            schedule: "inverse_sqrt".into(),
            warmup_steps: 200,
            weight_decay: 0.0,
            label_smoothing: 0.1,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 200,
            seed: 42,
            beam: 1,
            length_penalty: 0.0,
            max_output_length: 16,
            train_count: 2000,
            val_count: 400,
            min_len: 4,
            max_len: 24,
            alphabet: 8,
        }
    }
}

impl RunConfig {
    /// Apply one `key = value` override.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for key {key:?}")))
        }
        match key {
            "task" => {
                self.task = match value {
                    "dyck" => Task::Dyck,
                    "copy" => Task::Copy,
                    "reverse" => Task::Reverse,
                    _ => {
                        return Err(Error::Config(format!(
                            "unknown task {value:?} (expected dyck, copy, or reverse)"
                        )))
                    }
                }
            }
            "d" => self.d = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "depth_dec" => self.depth_dec = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "d_ffn" => self.d_ffn = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "optimizer" => self.optimizer = value.to_string(),
            "lr" => self.lr = parse(key, value)?,
            "schedule" => self.schedule = value.to_string(),
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_steps" => self.max_steps = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "length_penalty" => self.length_penalty = parse(key, value)?,
            "max_output_length" => self.max_output_length = parse(key, value)?,
            "train_count" => self.train_count = parse(key, value)?,
            "val_count" => self.val_count = parse(key, value)?,
            "min_len" => self.min_len = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "alphabet" => self.alphabet = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Apply a flat config file: one `key = value` per line, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Everything a rerun needs, in the config-file format itself.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("task", self.task.to_string());
        kv("d", self.d.to_string());
        kv("height", self.height.to_string());
        kv("depth", self.depth.to_string());
        kv("depth_dec", self.depth_dec.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("d_ffn", self.d_ffn.to_string());
        kv("dropout", self.dropout.to_string());
        kv("optimizer", self.optimizer.clone());
        kv("lr", self.lr.to_string());
        kv("schedule", self.schedule.clone());
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("label_smoothing", self.label_smoothing.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("max_steps", self.max_steps.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("seed", self.seed.to_string());
        kv("beam", self.beam.to_string());
        kv("length_penalty", self.length_penalty.to_string());
        kv("max_output_length", self.max_output_length.to_string());
        kv("train_count", self.train_count.to_string());
        kv("val_count", self.val_count.to_string());
        kv("min_len", self.min_len.to_string());
        kv("max_len", self.max_len.to_string());
        kv("alphabet", self.alphabet.to_string());
        out
    }

    /// Rebuild a config from an echo string.
    pub fn from_echo(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.height == 0 || self.batch_size == 0 || self.beam == 0 {
            return fail("d, height, batch_size, and beam must all be >= 1".into());
        }
        if self.d % self.n_heads != 0 {
            return fail(format!("d = {} not divisible by n_heads = {}", self.d, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing = {} outside [0, 1)", self.label_smoothing));
        }
        if self.lr <= 0.0 {
            return fail(format!("lr = {} must be positive", self.lr));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!("bad length range [{}, {}]", self.min_len, self.max_len));
        }
        if self.task == Task::Dyck && self.min_len < 2 {
            return fail("dyck min_len must be >= 2".into());
        }
        if self.alphabet == 0 {
            return fail("alphabet must be >= 1".into());
        }
        match self.optimizer.as_str() {
            "sgd" | "adam" => {}
            other => return fail(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
        match self.schedule.as_str() {
            "constant" | "inverse_sqrt" => {}
            other => {
                return fail(format!(
                    "unknown schedule {other:?} (expected constant or inverse_sqrt)"
                ))
            }
        }
        if self.task.is_seq2seq() && self.max_len > self.max_output_length {
            return fail(format!(
                "max_len = {} exceeds max_output_length = {}",
                self.max_len, self.max_output_length
            ));
        }
        Ok(())
    }

    /// Vocabulary implied by the task.
    pub fn vocab_size(&self) -> usize {
        match self.task {
            Task::Dyck => crate::data::DYCK_VOCAB,
            Task::Copy | Task::Reverse => 3 + self.alphabet,
        }
    }
}
