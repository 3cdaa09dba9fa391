//! Minimal differentiable building blocks: dense and convolutional layers
//! with explicit forward caches and hand-written backward passes, plus a
//! momentum SGD optimizer.

mod layers;
mod optim;

pub use layers::{relu, relu_backward, softmax_rows, Conv2d, Linear, MaxPool2};
pub use optim::{Sgd, SgdState};

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::scalar::Real;

/// A set of trainable tensors visited in a fixed order.
///
/// The same concrete type doubles as its own gradient container, so an
/// optimizer can zip `params.tensors_mut()` with `grads.tensors()`.
pub trait Parameters<T: Real> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>>;

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>>;

    /// Frozen parameter sets ignore optimizer steps entirely.
    fn frozen(&self) -> bool {
        false
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All parameters flattened in visiting order.
    fn flat(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied().collect::<Vec<_>>())
            .collect()
    }

    /// Euclidean distance between two parameter sets of the same shape.
    fn l2_distance(&self, other: &Self) -> f64
    where
        Self: Sized,
    {
        self.flat()
            .iter()
            .zip(other.flat())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Adds `other` element-wise; used to sum gradients from several passes.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (mut a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_mut_with(&b, |x, &y| *x = *x + y);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}
