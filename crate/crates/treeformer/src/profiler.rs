//! Cost model for the chart encoder and an instrumented profiler that checks
//! measured op counts against the closed forms, hard-failing on any mismatch.
//!
//! Closed forms, with m = min(H, n):
//!   compositions(n, H)  = sum over h in 1..=m of (n - h + 1)(h - 1)
//!   cells(n, H)         = sum over h in 1..=m of (n - h + 1)
//!   critical_path(n, H) = sum over h in 1..=m of (h - 1) = m(m - 1)/2
//! The pooling candidate total equals the composition count: every composed
//! candidate is pooled exactly once.

use crate::encoder::{
    encode_levelwise, encode_sequential, EncodeHooks, EncoderParams, OpCounters, TreeformerConfig,
};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;
use std::time::Instant;

/// Compositions for a full (untruncated) chart over n tokens.
pub fn compositions_closed_form(n: u64) -> u64 {
    compositions_height_limited(n, n)
}

/// Compositions with the chart truncated at height `h_cap`.
pub fn compositions_height_limited(n: u64, h_cap: u64) -> u64 {
    let m = h_cap.min(n);
    (1..=m).map(|h| (n - h + 1) * (h - 1)).sum()
}

/// Materialized chart cells, token level included.
pub fn cells_closed_form(n: u64, h_cap: u64) -> u64 {
    let m = h_cap.min(n);
    (1..=m).map(|h| n - h + 1).sum()
}

/// Sequential dependency depth when every level is computed at once: the
/// per-cell work at level h is h - 1 compositions, and levels are the only
/// serialization points.
pub fn critical_path(n: u64, h_cap: u64) -> u64 {
    let m = h_cap.min(n);
    m * (m - 1) / 2
}

/// Least-squares slope of ln(y) against ln(x).
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    assert!(points.len() >= 2, "slope needs at least two points");
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Sequential,
    LevelParallel,
}

#[derive(Clone, Copy, Debug)]
pub struct ProfileRecord {
    pub n: usize,
    pub h: usize,
    pub compositions: u64,
    pub pool_candidates: u64,
    pub cells: u64,
    pub level_steps: u64,
    pub wall_ms: f64,
    pub chart_bytes: u64,
}

pub const CSV_HEADER: &str = "n,H,compositions,pool_candidates,cells,level_steps,wall_ms,chart_bytes";

impl ProfileRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{}",
            self.n,
            self.h,
            self.compositions,
            self.pool_candidates,
            self.cells,
            self.level_steps,
            self.wall_ms,
            self.chart_bytes
        )
    }
}

fn random_inputs(
    tape: &mut Tape<f32>,
    n: usize,
    d: usize,
    seed: u64,
) -> (EncoderParams, Vec<TensorId>) {
    let mut r = rng::seeded(seed);
    let w_comp = tape.leaf(
        Tensor::matrix(d, 2 * d, rng::init_weight(&mut r, 2 * d, d * 2 * d)),
        false,
    );
    let b_comp = Some(tape.leaf(Tensor::row(vec![0.0f32; d]), false));
    let w_pool = tape.leaf(Tensor::row(rng::init_weight(&mut r, d, d)), false);
    let q_pool = tape.leaf(Tensor::matrix(d, d, rng::init_weight(&mut r, d, d * d)), false);
    let k_pool = tape.leaf(Tensor::matrix(d, d, rng::init_weight(&mut r, d, d * d)), false);
    let params = EncoderParams { w_comp, b_comp, w_pool, q_pool, k_pool };
    let tokens = (0..n)
        .map(|_| {
            let v: Vec<f32> = (0..d).map(|_| rng::uniform(&mut r, -1.0, 1.0)).collect();
            tape.constant(Tensor::row(v))
        })
        .collect();
    (params, tokens)
}

/// Encode once with counters, time `reps` further runs (median, one warmup
/// discarded), and verify every counter against its closed form.
pub fn profile_run(
    n: usize,
    h: usize,
    d: usize,
    seed: u64,
    reps: usize,
    schedule: Schedule,
) -> Result<ProfileRecord> {
    let reps = reps.max(5);
    let cfg = TreeformerConfig::new(d, h);
    let mut counters = OpCounters::default();
    {
        let mut tape = Tape::<f32>::new();
        let (params, tokens) = random_inputs(&mut tape, n, d, seed);
        match schedule {
            Schedule::Sequential => {
                encode_sequential(&mut tape, &tokens, cfg, &params, EncodeHooks::counting(&mut counters))?;
            }
            Schedule::LevelParallel => {
                encode_levelwise(&mut tape, &[tokens], cfg, &params, EncodeHooks::counting(&mut counters))?;
            }
        }
    }

    let (nu, hu) = (n as u64, h as u64);
    let expect_comp = compositions_height_limited(nu, hu);
    let expect_cells = cells_closed_form(nu, hu);
    let expect_steps = hu.min(nu) - 1;
    let check = |name: &str, got: u64, want: u64| -> Result<()> {
        if got != want {
            return Err(Error::contract(format!(
                "profiler counter {name} = {got} disagrees with closed form {want} (n={n}, H={h})"
            )));
        }
        Ok(())
    };
    check("compositions", counters.compositions, expect_comp)?;
    check("pool_candidates", counters.pooling_candidate_total, expect_comp)?;
    check("cells", counters.cells_written, expect_cells)?;
    check("level_steps", counters.level_steps, expect_steps)?;

    let mut times = Vec::with_capacity(reps);
    for rep in 0..=reps {
        let mut tape = Tape::<f32>::new();
        let (params, tokens) = random_inputs(&mut tape, n, d, seed);
        let start = Instant::now();
        match schedule {
            Schedule::Sequential => {
                encode_sequential(&mut tape, &tokens, cfg, &params, EncodeHooks::none())?;
            }
            Schedule::LevelParallel => {
                encode_levelwise(&mut tape, &[tokens], cfg, &params, EncodeHooks::none())?;
            }
        }
        if rep > 0 {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let wall_ms = times[times.len() / 2];

    Ok(ProfileRecord {
        n,
        h,
        compositions: counters.compositions,
        pool_candidates: counters.pooling_candidate_total,
        cells: counters.cells_written,
        level_steps: counters.level_steps,
        wall_ms,
        chart_bytes: expect_cells * d as u64 * 4,
    })
}
