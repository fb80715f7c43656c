//! First-order optimisers and learning-rate schedules.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd() -> Self {
        OptimizerKind::Sgd { momentum: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` at each listed epoch (0-based epoch index).
    Step {
        milestones: Vec<usize>,
        factor: f64,
    },
    /// Half-cosine decay from the base rate to zero over `total` epochs.
    Cosine {
        total: usize,
    },
}

impl LrSchedule {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, factor } => {
                let drops = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(drops as i32)
            }
            LrSchedule::Cosine { total } => {
                let frac = epoch as f64 / (*total).max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Optimiser state for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[&Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Optimizer {
            kind,
            second: if matches!(kind, OptimizerKind::Adam { .. }) {
                zeros.clone()
            } else {
                Vec::new()
            },
            first: zeros,
            steps: 0,
        }
    }

    /// One update. `grads[i]` is `None` for parameters the loss did not reach.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f64]>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    let Some(g) = g else { continue };
                    for ((w, gi), v) in p.data_mut().iter_mut().zip(g.iter()).zip(vel.iter_mut()) {
                        *v = momentum * *v + gi;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let Some(g) = g else { continue };
                    for (((w, gi), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.iter())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
