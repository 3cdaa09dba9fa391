#![allow(dead_code)]

use curda::models::{Classifier, Discriminator, Encoder, EncoderArch, Role};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 16x16 single-channel encoder small enough for finite differences.
pub fn tiny_arch() -> EncoderArch {
    EncoderArch {
        kind: EncoderArch::LENET_SMALL.into(),
        in_channels: 1,
        height: 16,
        width: 16,
        conv1: 3,
        conv2: 4,
        kernel: 5,
        feature_dim: 6,
    }
}

pub fn tiny_models(seed: u64) -> (Encoder<f64>, Classifier<f64>, Discriminator<f64>) {
    tiny_models_of(seed)
}

pub fn tiny_models_of<T: curda::scalar::Real>(seed: u64) -> (Encoder<T>, Classifier<T>, Discriminator<T>) {
    let mut r = rng(seed);
    let arch = tiny_arch();
    let enc = Encoder::new(&mut r, arch.clone(), Role::Source).unwrap();
    let clf = Classifier::new(&mut r, arch.feature_dim, 4);
    let disc = Discriminator::new(&mut r, arch.feature_dim, 7);
    (enc, clf, disc)
}

pub fn images(seed: u64, n: usize) -> Array4<f64> {
    let mut r = rng(seed);
    Array4::from_shape_fn((n, 1, 16, 16), |_| r.random::<f64>())
}

pub fn images_f32(seed: u64, n: usize, side: usize) -> Array4<f32> {
    let mut r = rng(seed);
    Array4::from_shape_fn((n, 1, side, side), |_| r.random::<f32>())
}

pub fn matrix(seed: u64, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((rows, cols), |_| scale * (r.random::<f64>() * 2.0 - 1.0))
}

pub fn probs(seed: u64, n: usize) -> Array1<f64> {
    let mut r = rng(seed);
    Array1::from_shape_fn(n, |_| 0.05 + 0.9 * r.random::<f64>())
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` at every entry of `x`, compared against `grad`.
pub fn check_gradient<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    f: impl Fn(&ndarray::Array<f64, D>) -> f64,
    what: &str,
) {
    let h = 1e-6;
    for (k, &g) in grad.iter().enumerate() {
        let shifted = |d: f64| {
            let mut z = x.clone();
            *z.iter_mut().nth(k).unwrap() += d;
            f(&z)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let err = relative_error(g, numeric);
        assert!(
            err <= 1e-4,
            "{what} at flat index {k}: analytic {g} numeric {numeric} rel err {err}"
        );
    }
}

use curda::config::ExperimentConfig;
use curda::data::{Domain, DomainPair, HeldOutLabels, Sample};
use curda::trainer::ExperimentData;

/// A class-dependent bright square plus noise; the target domain is dimmer.
pub fn synthetic_samples(seed: u64, n: usize, domain: Domain) -> Vec<Sample> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let class = i % 4;
            let (oy, ox) = (2 + 6 * (class / 2), 2 + 6 * (class % 2));
            let gain = if domain == Domain::Target { 0.7 } else { 1.0 };
            let pixels = ndarray::Array3::from_shape_fn((1, 16, 16), |(_, y, x)| {
                let inside = (oy..oy + 6).contains(&y) && (ox..ox + 6).contains(&x);
                let base = if inside { gain } else { 0.0 };
                (base + 0.2 * r.random::<f32>()).min(1.0)
            });
            Sample {
                pixels,
                label: (domain == Domain::Source).then_some(class),
                domain,
            }
        })
        .collect()
}

pub fn synthetic_data() -> ExperimentData {
    let target = synthetic_samples(2, 24, Domain::Target);
    let truth: Vec<usize> = (0..24).map(|i| i % 4).collect();
    ExperimentData {
        pair: DomainPair::new(synthetic_samples(1, 32, Domain::Source), target, 4).unwrap(),
        target_train_truth: Some(HeldOutLabels::new(truth)),
        target_test: synthetic_samples(3, 12, Domain::Target),
        target_test_truth: HeldOutLabels::new((0..12).map(|i| i % 4).collect()),
        source_test: None,
    }
}

pub const TINY_CONFIG: &str = r#"
name = "tiny"
method = "curda"
seed = 3

[data]
pair_id = "SYN"
format = "idx"
source_train = "unused"
target_train = "unused"
target_test = "unused"
num_classes = 4
height = 16
width = 16

[model]
discriminator_hidden = 8

[model.encoder]
in_channels = 1
height = 16
width = 16
conv1 = 3
conv2 = 4
kernel = 5
feature_dim = 6

[source]
epochs = 2
batch_size = 8
lr = 0.05
checkpoint_every = 1

[adapt]
epochs = 2
batch_size = 8
lr = 0.01
checkpoint_every = 1

[attack.train]
epsilon = 0.1
step_size = 0.05
num_steps = 2
random_start = true

[attack.eval]
epsilon = 0.1
step_size = 0.05
num_steps = 2
random_start = false

[attack.label_free]
epsilon = 0.1
step_size = 0.05
num_steps = 2
random_start = true

[labeler]
tau = 2
p_pseudo = 0.3
"#;

pub fn tiny_config() -> ExperimentConfig {
    let cfg = ExperimentConfig::from_toml_str(TINY_CONFIG).unwrap();
    cfg.validate().unwrap();
    cfg
}
