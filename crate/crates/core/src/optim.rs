//! SGD with momentum and a step-decay learning-rate schedule.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::params::ParamStore;

/// `rate(step) = base / factor^(number of decay steps <= step)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay_steps: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            decay_steps: Vec::new(),
            decay_factor: 10.0,
        }
    }

    pub fn rate(&self, step: usize) -> f64 {
        let passed = self.decay_steps.iter().filter(|&&s| step >= s).count();
        self.base / self.decay_factor.powi(passed as i32)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.decay_steps.windows(2).all(|w| w[0] < w[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
    velocity: IndexMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, clip_norm: Option<f64>) -> Self {
        Self {
            momentum,
            clip_norm,
            velocity: IndexMap::new(),
        }
    }

    pub fn velocity(&self) -> &IndexMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: IndexMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Applies one update for every parameter that has a gradient. Parameters
    /// without a gradient (frozen or untouched) are left bitwise unchanged.
    pub fn step(&mut self, store: &mut ParamStore, grads: &IndexMap<String, Tensor>, lr: f64) {
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = grads
                    .values()
                    .flat_map(|g| g.data().iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (name, grad) in grads {
            let Some(param) = store.get_mut(name) else {
                continue;
            };
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.rows(), grad.cols()));
            for ((p, v), g) in param
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut().iter_mut())
                .zip(grad.data())
            {
                *v = self.momentum * *v + scale * g;
                *p -= lr * *v;
            }
        }
    }
}
