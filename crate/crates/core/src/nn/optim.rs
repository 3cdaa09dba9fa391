use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::scalar::Real;

/// Momentum SGD with coupled L2 weight decay:
/// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Sgd<T: Real> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    state: SgdState<T>,
}

/// Momentum buffers, one per parameter tensor, created lazily on first step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SgdState<T: Real> {
    pub buffers: Vec<ArrayD<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            state: SgdState { buffers: Vec::new() },
        }
    }

    pub fn state(&self) -> &SgdState<T> {
        &self.state
    }

    pub fn restore(&mut self, state: SgdState<T>) {
        self.state = state;
    }

    /// Applies one update. Frozen parameter sets are left untouched.
    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) {
        if params.frozen() {
            return;
        }
        let grads = grads.tensors();
        if self.state.buffers.is_empty() {
            self.state.buffers = grads.iter().map(|g| ArrayD::zeros(g.raw_dim())).collect();
        }
        let (lr, mu, wd) = (T::of(self.lr), T::of(self.momentum), T::of(self.weight_decay));
        for ((mut p, g), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.iter())
            .zip(self.state.buffers.iter_mut())
        {
            ndarray::Zip::from(&mut p).and(g).and(v).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p = *p - lr * *v;
            });
        }
    }
}
