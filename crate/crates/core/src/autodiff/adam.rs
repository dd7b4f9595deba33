use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Polynomial decay `lr(k) = lr_f + (lr_0 − lr_f)·(1 − k/K)^power`, held at `lr_f` past `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub last: f64,
    pub total_steps: u64,
    pub power: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 5e-4,
            last: 5e-6,
            total_steps: 400_000,
            power: 1.0,
        }
    }
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            last: lr,
            total_steps: 1,
            power: 1.0,
        }
    }

    /// The last `steps` steps of this schedule as a schedule of its own.
    pub fn tail(&self, steps: u64) -> Self {
        Self {
            initial: self.lr(self.total_steps.saturating_sub(steps)),
            last: self.last,
            total_steps: steps,
            power: self.power,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.last;
        }
        let frac = 1.0 - (step.min(self.total_steps) as f64 / self.total_steps as f64);
        self.last + (self.initial - self.last) * frac.powf(self.power)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    /// Zero moments matching `params` exactly.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, schedule: LrSchedule) -> Self {
        let m: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.dim()))
            .collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one bias-corrected Adam update in place and returns the learning rate used.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(
                "adam_step",
                format!(
                    "{} params / {} grads for {} moment slots",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.dim(),
                    rhs: g.dim(),
                });
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p -= lr * mh / (vh.sqrt() + eps);
                });
        }
        Ok(lr)
    }
}
