//! Finite-difference gradient checking.
//!
//! Analytic gradients come from the tape in precision `A`; the numerical side
//! is central differences evaluated in precision `N`. Checking an f32 model
//! therefore uses A = f32 against an f64 oracle, which keeps the difference
//! quotient sharp while still validating the 32-bit gradient path.

use super::tape::{Tape, TensorId};
use super::{s, Scalar, Tensor};
use crate::error::Result;

/// Loss builder: leaf ids for every parameter are handed in, a scalar loss
/// comes back. Must be deterministic (no fresh randomness inside).
pub type LossBuilder<F> = dyn Fn(&mut Tape<F>, &[TensorId]) -> Result<TensorId>;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// element index where the worst error occurred
    pub argmax: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() <= tolerance
    }
}

/// Per-parameter max relative error between analytic and central-difference
/// gradients. `step` is the half-width of the central difference;
/// `denom_floor` keeps the relative error well-defined near zero gradients.
pub fn grad_check<A: Scalar, N: Scalar>(
    params: &[(String, Tensor<A>)],
    build_analytic: &LossBuilder<A>,
    build_numeric: &LossBuilder<N>,
    step: f64,
    denom_floor: f64,
) -> Result<GradCheckReport> {
    // Analytic pass.
    let mut tape = Tape::<A>::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(_, t)| tape.leaf(t.clone(), true))
        .collect();
    let loss = build_analytic(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(params.iter())
        .map(|(&id, (_, p))| match tape.grad(id) {
            Some(g) => g.data().iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.numel()],
        })
        .collect();

    // Numeric pass, one element at a time.
    let mut numeric_params: Vec<Tensor<N>> = params.iter().map(|(_, t)| t.cast()).collect();
    let eval = |ps: &[Tensor<N>]| -> Result<f64> {
        let mut tape = Tape::<N>::new();
        let ids: Vec<TensorId> = ps.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build_numeric(&mut tape, &ids)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut entries = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut worst = 0.0f64;
        let mut argmax = 0;
        for ei in 0..params[pi].1.numel() {
            let orig = numeric_params[pi].data()[ei];
            numeric_params[pi].data_mut()[ei] = orig + s::<N>(step);
            let plus = eval(&numeric_params)?;
            numeric_params[pi].data_mut()[ei] = orig - s::<N>(step);
            let minus = eval(&numeric_params)?;
            numeric_params[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(denom_floor);
            if rel > worst {
                worst = rel;
                argmax = ei;
            }
        }
        entries.push(GradCheckEntry {
            name: params[pi].0.clone(),
            max_rel_err: worst,
            argmax,
        });
    }
    Ok(GradCheckReport { entries })
}

/// Same-precision check, the default for 64-bit verification runs.
pub fn grad_check_same<F: Scalar>(
    params: &[(String, Tensor<F>)],
    build: &LossBuilder<F>,
    step: f64,
    denom_floor: f64,
) -> Result<GradCheckReport> {
    grad_check::<F, F>(params, build, build, step, denom_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_machine_exact() {
        let params = vec![("x".to_string(), Tensor::row(vec![1.0f64, -2.0, 0.5]))];
        let build: Box<LossBuilder<f64>> = Box::new(|tape, ids| {
            let y = tape.scale(ids[0], 3.0);
            Ok(tape.sum_all(y))
        });
        let report = grad_check_same(&params, &build, 1e-6, 1e-8).unwrap();
        assert!(report.max_rel_err() < 1e-9, "{}", report.max_rel_err());
    }

    #[test]
    fn nonlinear_f64_within_tolerance() {
        let params = vec![(
            "x".to_string(),
            Tensor::row(vec![0.3f64, -1.2, 2.0, 0.01]),
        )];
        let build: Box<LossBuilder<f64>> = Box::new(|tape, ids| {
            let y = tape.tanh(ids[0]);
            let z = tape.softmax_last(y);
            let w = tape.mul_elem(z, y);
            Ok(tape.sum_all(w))
        });
        let report = grad_check_same(&params, &build, 1e-6, 1e-8).unwrap();
        assert!(report.max_rel_err() < 1e-6, "{}", report.max_rel_err());
    }

    #[test]
    fn corrupted_primitive_reports_large_error() {
        let params = vec![("x".to_string(), Tensor::row(vec![0.7f64, -0.4]))];
        let good: Box<LossBuilder<f64>> = Box::new(|tape, ids| {
            let y = tape.tanh(ids[0]);
            Ok(tape.sum_all(y))
        });
        let bad: Box<LossBuilder<f64>> = Box::new(|tape, ids| {
            let flipped = tape.neg_grad_identity(ids[0]);
            let y = tape.tanh(flipped);
            Ok(tape.sum_all(y))
        });
        let report = grad_check::<f64, f64>(&params, &bad, &good, 1e-6, 1e-8).unwrap();
        assert!(report.max_rel_err() >= 0.5, "{}", report.max_rel_err());
    }

    #[test]
    fn f32_model_against_f64_oracle() {
        let params = vec![(
            "x".to_string(),
            Tensor::row(vec![0.25f32, -0.75, 1.5]),
        )];
        fn build<F: Scalar>(tape: &mut Tape<F>, ids: &[TensorId]) -> Result<TensorId> {
            let y = tape.softmax_last(ids[0]);
            let z = tape.mul_elem(y, y);
            Ok(tape.sum_all(z))
        }
        let report = grad_check::<f32, f64>(&params, &build::<f32>, &build::<f64>, 1e-4, 1e-6)
            .unwrap();
        assert!(report.max_rel_err() < 1e-3, "{}", report.max_rel_err());
    }
}
