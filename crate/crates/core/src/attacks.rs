//! L∞ adversarial example generation.
//!
//! Both generators run sign-gradient ascent with projection onto the ε-ball
//! around the clean input and onto the `[0, 1]` pixel box. PGD ascends
//! cross-entropy against known labels; the label-free generator ascends
//! `KL(C(E(x)) ‖ C(E(x')))` and therefore needs no labels.

use ndarray::{Array2, Array4, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, trade_kl_from_logits};
use crate::models::{Classifier, Encoder};
use crate::scalar::{sign, Real};

/// Standard deviation of the Gaussian start used by the label-free generator.
pub const LABEL_FREE_START_STD: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    LInf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    #[serde(default = "AttackBudget::default_norm")]
    pub norm: Norm,
    pub epsilon: f64,
    pub step_size: f64,
    pub num_steps: usize,
    pub random_start: bool,
}

impl AttackBudget {
    fn default_norm() -> Norm {
        Norm::LInf
    }

    /// ε = 0.3, step 0.01, 20 steps: binary digit images.
    pub fn binary_images(random_start: bool) -> Self {
        Self {
            norm: Norm::LInf,
            epsilon: 0.3,
            step_size: 0.01,
            num_steps: 20,
            random_start,
        }
    }

    /// ε = 0.031, step 0.007, 20 steps: color images.
    pub fn color_images(random_start: bool) -> Self {
        Self {
            norm: Norm::LInf,
            epsilon: 0.031,
            step_size: 0.007,
            num_steps: 20,
            random_start,
        }
    }

    /// A zero budget is accepted as the degenerate "no attack" case.
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.num_steps == 0 {
            return Err(Error::Config("num_steps must be at least 1".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step_size must lie in (0, epsilon], got {} with epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Clips `z` into the ε-ball around `x`, then into `[0, 1]`.
pub fn project<T: Real>(z: &Array4<T>, x: &Array4<T>, epsilon: f64) -> Array4<T> {
    let eps = T::of(epsilon);
    let mut out = z.clone();
    Zip::from(&mut out).and(x).for_each(|o, &c| {
        *o = o.max(c - eps).min(c + eps).max(T::zero()).min(T::one());
    });
    out
}

/// Per-iterate objective values recorded during an attack; entry `k` is the
/// objective at iterate `k`, entry 0 being the starting point.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttackTrace {
    pub objective: Vec<f64>,
}

fn check_finite<T: Real>(grad: &Array4<T>, step: usize) -> Result<()> {
    let bad = grad.iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numerical(format!(
            "{bad} of {} input-gradient entries non-finite at attack step {step}",
            grad.len()
        )));
    }
    Ok(())
}

/// Runs the projected sign-ascent loop. `objective` returns `(value, d value / d x')`.
fn ascend<T, F>(
    x: &Array4<T>,
    start: Array4<T>,
    budget: &AttackBudget,
    mut objective: F,
    trace: Option<&mut AttackTrace>,
) -> Result<Array4<T>>
where
    T: Real,
    F: FnMut(&Array4<T>) -> Result<(f64, Array4<T>)>,
{
    let mut adv = project(&start, x, budget.epsilon);
    let step = T::of(budget.step_size);
    let mut values = Vec::with_capacity(budget.num_steps + 1);
    for k in 0..budget.num_steps {
        let (value, grad) = objective(&adv)?;
        check_finite(&grad, k)?;
        values.push(value);
        Zip::from(&mut adv)
            .and(&grad)
            .for_each(|a, &g| *a = *a + step * sign(g));
        adv = project(&adv, x, budget.epsilon);
    }
    if let Some(trace) = trace {
        values.push(objective(&adv)?.0);
        trace.objective = values;
    }
    Ok(adv)
}

fn ce_objective<'m, T: Real>(
    encoder: &'m Encoder<T>,
    classifier: &'m Classifier<T>,
    labels: &'m [usize],
) -> impl FnMut(&Array4<T>) -> Result<(f64, Array4<T>)> + 'm {
    move |adv| {
        let (features, enc_cache) = encoder.forward_train(adv)?;
        let (logits, clf_cache) = classifier.forward_train(&features)?;
        let ce = cross_entropy(&logits, labels)?;
        let (_, d_features) = classifier.backward(&clf_cache, &ce.grad, false);
        let (_, d_x) = encoder.backward(&enc_cache, &d_features, false);
        Ok((ce.value.as_f64(), d_x))
    }
}

fn kl_objective<'m, T: Real>(
    encoder: &'m Encoder<T>,
    classifier: &'m Classifier<T>,
    clean_logits: Array2<T>,
) -> impl FnMut(&Array4<T>) -> Result<(f64, Array4<T>)> + 'm {
    move |adv| {
        let (features, enc_cache) = encoder.forward_train(adv)?;
        let (logits, clf_cache) = classifier.forward_train(&features)?;
        let kl = trade_kl_from_logits(&clean_logits, &logits)?;
        let (_, d_features) = classifier.backward(&clf_cache, &kl.grad_adv, false);
        let (_, d_x) = encoder.backward(&enc_cache, &d_features, false);
        Ok((kl.value.as_f64(), d_x))
    }
}

fn uniform_start<T: Real, R: Rng + ?Sized>(x: &Array4<T>, epsilon: f64, rng: &mut R) -> Array4<T> {
    if epsilon == 0.0 {
        return x.clone();
    }
    x.mapv(|v| v + T::of(rng.random_range(-epsilon..=epsilon)))
}

fn gaussian_start<T: Real, R: Rng + ?Sized>(x: &Array4<T>, rng: &mut R) -> Array4<T> {
    x.mapv(|v| {
        let z: f64 = StandardNormal.sample(rng);
        v + T::of(LABEL_FREE_START_STD * z)
    })
}

/// Supervised L∞ PGD on cross-entropy. With `random_start` the search starts
/// from a uniform point of the ε-ball.
pub fn pgd_attack<T: Real, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Array4<T>,
    labels: Option<&[usize]>,
    budget: &AttackBudget,
    rng: &mut R,
) -> Result<Array4<T>> {
    pgd_attack_traced(encoder, classifier, x, labels, budget, rng, None)
}

pub fn pgd_attack_traced<T: Real, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Array4<T>,
    labels: Option<&[usize]>,
    budget: &AttackBudget,
    rng: &mut R,
    trace: Option<&mut AttackTrace>,
) -> Result<Array4<T>> {
    budget.validate()?;
    let labels = labels.ok_or_else(|| Error::Contract("PGD attack requires labels".into()))?;
    if labels.len() != x.dim().0 {
        return Err(Error::Contract(format!(
            "{} labels for {} images",
            labels.len(),
            x.dim().0
        )));
    }
    if budget.epsilon == 0.0 {
        if let Some(t) = trace {
            t.objective.clear();
        }
        return Ok(x.clone());
    }
    let start = if budget.random_start {
        uniform_start(x, budget.epsilon, rng)
    } else {
        x.clone()
    };
    ascend(x, start, budget, ce_objective(encoder, classifier, labels), trace)
}

/// Label-free generator maximizing `KL(C(E(x)) ‖ C(E(x')))`. With
/// `random_start` the search starts from `x` plus small Gaussian noise; without
/// it, `x` is a stationary point of the objective and is returned unchanged.
pub fn label_free_attack<T: Real, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Array4<T>,
    budget: &AttackBudget,
    rng: &mut R,
) -> Result<Array4<T>> {
    label_free_attack_traced(encoder, classifier, x, budget, rng, None)
}

pub fn label_free_attack_traced<T: Real, R: Rng + ?Sized>(
    encoder: &Encoder<T>,
    classifier: &Classifier<T>,
    x: &Array4<T>,
    budget: &AttackBudget,
    rng: &mut R,
    trace: Option<&mut AttackTrace>,
) -> Result<Array4<T>> {
    budget.validate()?;
    if budget.epsilon == 0.0 {
        if let Some(t) = trace {
            t.objective.clear();
        }
        return Ok(x.clone());
    }
    let clean_logits = classifier.forward(&encoder.forward(x)?)?.0;
    let start = if budget.random_start {
        gaussian_start(x, rng)
    } else {
        x.clone()
    };
    ascend(x, start, budget, kl_objective(encoder, classifier, clean_logits), trace)
}

/// [`pgd_attack`] on a labeled batch.
pub fn pgd_attack_batch<R: Rng + ?Sized>(
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    batch: &Batch<'_>,
    budget: &AttackBudget,
    rng: &mut R,
) -> Result<Array4<f32>> {
    let labels = batch
        .labels()
        .ok_or_else(|| Error::Contract("PGD attack requires a labeled batch".into()))?;
    pgd_attack(encoder, classifier, &batch.pixels(), Some(&labels), budget, rng)
}

/// [`label_free_attack`] on a batch; labels, if any, are ignored.
pub fn label_free_attack_batch<R: Rng + ?Sized>(
    encoder: &Encoder<f32>,
    classifier: &Classifier<f32>,
    batch: &Batch<'_>,
    budget: &AttackBudget,
    rng: &mut R,
) -> Result<Array4<f32>> {
    label_free_attack(encoder, classifier, &batch.pixels(), budget, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_idempotent_and_contained() {
        let x = Array4::from_shape_vec((1, 1, 1, 4), vec![0.0f64, 0.5, 1.0, 0.2]).unwrap();
        let z = Array4::from_shape_vec((1, 1, 1, 4), vec![-1.0f64, 0.9, 0.5, 0.21]).unwrap();
        let once = project(&z, &x, 0.3);
        assert_eq!(once, project(&once, &x, 0.3));
        assert_eq!(once.as_slice().unwrap(), &[0.0, 0.8, 0.7, 0.21]);
    }

    #[test]
    fn budget_validation() {
        assert!(AttackBudget::binary_images(true).validate().is_ok());
        assert!(AttackBudget::color_images(false).validate().is_ok());
        let mut b = AttackBudget::binary_images(false);
        b.step_size = 0.5;
        assert!(b.validate().is_err());
        b = AttackBudget::binary_images(false);
        b.num_steps = 0;
        assert!(b.validate().is_err());
        b = AttackBudget::binary_images(false);
        b.epsilon = 0.0;
        assert!(b.validate().is_ok());
    }
}
