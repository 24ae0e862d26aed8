//! Plain SGD and an Adam-style adaptive optimizer with an optional
//! inverse-square-root warmup schedule.

use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate, then decay proportional to 1/sqrt(step).
    InverseSqrt { warmup_steps: usize },
}

impl Schedule {
    pub fn factor(&self, step: usize) -> f64 {
        let t = step.max(1) as f64;
        match *self {
            Schedule::Constant => 1.0,
            Schedule::InverseSqrt { warmup_steps } => {
                let w = warmup_steps.max(1) as f64;
                (t / w).min((w / t).sqrt())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam_default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
}

pub struct Optimizer<F: Scalar> {
    cfg: OptimConfig,
    step: usize,
    moment1: Vec<Vec<F>>,
    moment2: Vec<Vec<F>>,
}

impl<F: Scalar> Optimizer<F> {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr * self.cfg.schedule.factor(self.step.max(1))
    }

    /// One update. `params` and `grads` are aligned one-to-one; a `None` grad
    /// means the parameter was unreachable from the loss and is left alone.
    /// A NaN anywhere in the grads aborts the whole step untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor<F>)],
        grads: &mut [Option<Tensor<F>>],
    ) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "params/grads misaligned");
        for ((name, _), grad) in params.iter().zip(grads.iter()) {
            if let Some(g) = grad {
                if !g.all_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient for parameter {name}; step aborted"
                    )));
                }
            }
        }
        if self.moment1.is_empty() {
            self.moment1 = params.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect();
            self.moment2 = params.iter().map(|(_, p)| vec![F::zero(); p.numel()]).collect();
        }
        self.step += 1;
        let lr = s::<F>(self.cfg.lr * self.cfg.schedule.factor(self.step));
        let wd = s::<F>(self.cfg.weight_decay);
        for (i, ((_, param), grad)) in params.iter_mut().zip(grads.iter_mut()).enumerate() {
            let Some(g) = grad else { continue };
            match self.cfg.kind {
                OptimKind::Sgd => {
                    for (p, gv) in param.data_mut().iter_mut().zip(g.data().iter()) {
                        let eff = *gv + wd * *p;
                        *p = *p - lr * eff;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, e) = (s::<F>(beta1), s::<F>(beta2), s::<F>(eps));
                    let bc1 = F::one() - s::<F>(beta1.powi(self.step as i32));
                    let bc2 = F::one() - s::<F>(beta2.powi(self.step as i32));
                    let m = &mut self.moment1[i];
                    let v = &mut self.moment2[i];
                    for (j, (p, gv)) in param
                        .data_mut()
                        .iter_mut()
                        .zip(g.data().iter())
                        .enumerate()
                    {
                        let eff = *gv + wd * *p;
                        m[j] = b1 * m[j] + (F::one() - b1) * eff;
                        v[j] = b2 * v[j] + (F::one() - b2) * eff * eff;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        *p = *p - lr * mhat / (vhat.sqrt() + e);
                    }
                }
            }
            // grads are consumed by the step
            for gv in g.data_mut().iter_mut() {
                *gv = F::zero();
            }
        }
        Ok(())
    }
}
