//! Synthetic datasets with hierarchical structure: Dyck-2 well-formedness
//! classification and copy/reverse transduction. Also the plain-text dataset
//! file format used by the CLI.
//!
//! Token id conventions, shared by every task:
//!   0 pad, 1 bos, 2 eos, payload symbols from 3 upward.

use crate::error::{Error, Result};
use crate::rng::Prng;
use rand::Rng;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Dyck-2 brackets: ( ) [ ]
pub const OPEN_PAREN: usize = 3;
pub const CLOSE_PAREN: usize = 4;
pub const OPEN_SQUARE: usize = 5;
pub const CLOSE_SQUARE: usize = 6;
pub const DYCK_VOCAB: usize = 7;

/// Stack oracle for Dyck-2 well-formedness. Non-bracket ids make the word
/// invalid.
pub fn is_balanced(tokens: &[usize]) -> bool {
    let mut stack = Vec::new();
    for &t in tokens {
        match t {
            OPEN_PAREN | OPEN_SQUARE => stack.push(t),
            CLOSE_PAREN => {
                if stack.pop() != Some(OPEN_PAREN) {
                    return false;
                }
            }
            CLOSE_SQUARE => {
                if stack.pop() != Some(OPEN_SQUARE) {
                    return false;
                }
            }
            _ => return false,
        }
    }
    stack.is_empty()
}

/// Sample a well-formed Dyck-2 word of exactly `len` tokens (`len` even > 0).
pub fn sample_balanced(rng: &mut Prng, len: usize) -> Vec<usize> {
    assert!(len >= 2 && len % 2 == 0, "dyck length must be even and >= 2");
    let mut out = Vec::with_capacity(len);
    let mut stack: Vec<usize> = Vec::new();
    for pos in 0..len {
        let remaining = len - pos;
        let must_close = stack.len() == remaining;
        let must_open = stack.is_empty();
        let open = must_open || (!must_close && rng.gen_bool(0.5));
        if open {
            let b = if rng.gen_bool(0.5) { OPEN_PAREN } else { OPEN_SQUARE };
            stack.push(b);
            out.push(b);
        } else {
            let b = stack.pop().unwrap();
            out.push(if b == OPEN_PAREN { CLOSE_PAREN } else { CLOSE_SQUARE });
        }
    }
    debug_assert!(is_balanced(&out));
    out
}

/// Corrupt a balanced word with single-token edits until the oracle rejects
/// it. Usually one edit suffices; a swapped bracket type can stay legal only
/// when it re-pairs, which the retry loop handles.
pub fn corrupt(rng: &mut Prng, tokens: &[usize]) -> Vec<usize> {
    let brackets = [OPEN_PAREN, CLOSE_PAREN, OPEN_SQUARE, CLOSE_SQUARE];
    loop {
        let mut bad = tokens.to_vec();
        let pos = rng.gen_range(0..bad.len());
        let repl = loop {
            let c = brackets[rng.gen_range(0..4)];
            if c != bad[pos] {
                break c;
            }
        };
        bad[pos] = repl;
        if !is_balanced(&bad) {
            return bad;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<usize>,
    /// 1 = well formed, 0 = corrupted
    pub label: usize,
}

/// Balanced (50/50 by construction) Dyck-2 classification set. Lengths are
/// drawn uniformly from the even values in [min_len, max_len].
pub fn gen_dyck(rng: &mut Prng, count: usize, min_len: usize, max_len: usize) -> Vec<LabeledExample> {
    assert!(min_len >= 2 && min_len <= max_len, "bad dyck length range");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let lo = min_len.div_ceil(2);
        let hi = max_len / 2;
        let len = 2 * rng.gen_range(lo..=hi);
        let good = sample_balanced(rng, len);
        if i % 2 == 0 {
            out.push(LabeledExample { tokens: good, label: 1 });
        } else {
            let bad = corrupt(rng, &good);
            out.push(LabeledExample { tokens: bad, label: 0 });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqExample {
    pub source: Vec<usize>,
    /// full wrapped target: bos, payload, eos
    pub target: Vec<usize>,
}

fn wrap(payload: Vec<usize>) -> Vec<usize> {
    let mut t = Vec::with_capacity(payload.len() + 2);
    t.push(BOS_ID);
    t.extend(payload);
    t.push(EOS_ID);
    t
}

/// Copy (or, with `reverse`, reversal) transduction examples over an alphabet
/// of `alphabet` payload symbols (ids 3 .. 3+alphabet).
pub fn gen_copy_reverse(
    rng: &mut Prng,
    count: usize,
    min_len: usize,
    max_len: usize,
    alphabet: usize,
    reverse: bool,
) -> Vec<SeqExample> {
    assert!(alphabet >= 1 && min_len >= 1 && min_len <= max_len, "bad copy task range");
    (0..count)
        .map(|_| {
            let len = rng.gen_range(min_len..=max_len);
            let source: Vec<usize> = (0..len).map(|_| 3 + rng.gen_range(0..alphabet)).collect();
            let mut payload = source.clone();
            if reverse {
                payload.reverse();
            }
            SeqExample { source, target: wrap(payload) }
        })
        .collect()
}

/// Right-pad every sequence to the longest with pad id 0; also returns the
/// true lengths.
pub fn pad_batch(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let padded = seqs
        .iter()
        .map(|s| {
            let mut p = s.clone();
            p.resize(width, PAD_ID);
            p
        })
        .collect();
    (padded, lengths)
}

/// Fixed-size chunks in order; the last batch may be short.
pub fn batch_iter<T>(items: &[T], batch_size: usize) -> impl Iterator<Item = &[T]> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    items.chunks(batch_size)
}

/// One dataset row: source tokens, then a tab, then target tokens. Targets
/// are labels (single number) for classification and payload sequences for
/// transduction. `#`-prefixed header lines echo `key = value` settings.
pub fn write_dataset(
    path: &Path,
    header: &[(String, String)],
    rows: &[(Vec<usize>, Vec<usize>)],
) -> Result<()> {
    let mut buf = String::new();
    for (k, v) in header {
        buf.push_str(&format!("# {k} = {v}\n"));
    }
    for (src, tgt) in rows {
        let s: Vec<String> = src.iter().map(|t| t.to_string()).collect();
        let t: Vec<String> = tgt.iter().map(|t| t.to_string()).collect();
        buf.push_str(&s.join(" "));
        buf.push('\t');
        buf.push_str(&t.join(" "));
        buf.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<(Vec<(String, String)>, Vec<(Vec<usize>, Vec<usize>)>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                header.push((k.trim().to_string(), v.trim().to_string()));
            }
            continue;
        }
        let (src, tgt) = line.split_once('\t').ok_or_else(|| {
            Error::Dataset(format!("{}:{}: missing tab separator", path.display(), lineno + 1))
        })?;
        let parse = |field: &str| -> Result<Vec<usize>> {
            field
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|_| {
                        Error::Dataset(format!(
                            "{}:{}: bad token {tok:?}",
                            path.display(),
                            lineno + 1
                        ))
                    })
                })
                .collect()
        };
        rows.push((parse(src)?, parse(tgt)?));
    }
    Ok((header, rows))
}
