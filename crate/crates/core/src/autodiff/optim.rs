use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use crate::error::{Error, Result};

pub const MOMENTUM: f64 = 0.9;

/// SGD with heavy-ball momentum. Velocities are kept per parameter slot, in
/// the order parameters are passed to [`Sgd::step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Default for Sgd {
    fn default() -> Self {
        Self::new(MOMENTUM)
    }
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// `v = momentum * v + grad; value -= lr * v` for trainable parameters.
    /// Frozen parameters are never written.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        for (slot, p) in params.into_iter().enumerate() {
            if self.velocity.len() <= slot {
                self.velocity.push(vec![0.0; p.value.len()]);
            }
            if !p.trainable {
                continue;
            }
            let v = &mut self.velocity[slot];
            debug_assert_eq!(v.len(), p.value.len());
            for ((x, g), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + g;
                *x -= lr * *vi;
            }
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. Moments are kept per parameter slot like
/// [`Sgd`]; frozen parameters are never written.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (slot, p) in params.into_iter().enumerate() {
            if self.m.len() <= slot {
                self.m.push(vec![0.0; p.value.len()]);
                self.v.push(vec![0.0; p.value.len()]);
            }
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((x, g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer state for either kind.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::default()),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new()),
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Parameter>, lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, lr),
            Optimizer::Adam(o) => o.step(params, lr),
        }
    }
}

/// Exponential decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub const START: f64 = 1e-3;
    pub const END: f64 = 1e-6;

    pub fn new(total_epochs: usize) -> Self {
        Self {
            lr_start: Self::START,
            lr_end: Self::END,
            total_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 || !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!("invalid learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::EpochOutOfRange {
                epoch,
                total: self.total_epochs,
            });
        }
        if self.total_epochs == 1 {
            return Ok(self.lr_start);
        }
        if epoch == self.total_epochs - 1 {
            return Ok(self.lr_end);
        }
        let frac = epoch as f64 / (self.total_epochs - 1) as f64;
        Ok(self.lr_start * (self.lr_end / self.lr_start).powf(frac))
    }
}
