//! Encoder, classifier head and domain discriminator, each with a cached
//! training forward pass and an explicit backward pass.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, relu_backward, softmax_rows, Conv2d, Linear, MaxPool2, Parameters};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Source,
    Target,
}

/// Two conv/pool/ReLU stages followed by a dense projection to `feature_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    #[serde(default = "EncoderArch::default_kind")]
    pub kind: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub kernel: usize,
    pub feature_dim: usize,
}

impl EncoderArch {
    pub const LENET_SMALL: &'static str = "lenet-small";

    fn default_kind() -> String {
        Self::LENET_SMALL.to_string()
    }

    /// The DIGITS-sized LeNet variant: 20 and 50 filters, 500 features.
    pub fn lenet(in_channels: usize) -> Self {
        Self {
            kind: Self::default_kind(),
            in_channels,
            height: 28,
            width: 28,
            conv1: 20,
            conv2: 50,
            kernel: 5,
            feature_dim: 500,
        }
    }

    fn stage_dims(&self) -> Result<((usize, usize), (usize, usize))> {
        let step = |h: usize| -> Option<usize> {
            let conv = h.checked_sub(self.kernel - 1)?;
            (conv >= 2).then_some(conv / 2)
        };
        let bad = || Error::Config(format!("input {}x{} too small for {:?}", self.height, self.width, self));
        let h1 = step(self.height).ok_or_else(bad)?;
        let w1 = step(self.width).ok_or_else(bad)?;
        let h2 = step(h1).ok_or_else(bad)?;
        let w2 = step(w1).ok_or_else(bad)?;
        Ok(((h1, w1), (h2, w2)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != Self::LENET_SMALL {
            return Err(Error::Config(format!("unknown encoder kind {:?}", self.kind)));
        }
        if [self.in_channels, self.conv1, self.conv2, self.kernel, self.feature_dim].contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        self.stage_dims().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Encoder<T: Real> {
    pub arch: EncoderArch,
    pub role: Role,
    pub frozen: bool,
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub fc: Linear<T>,
}

/// Intermediate activations kept for [`Encoder::backward`].
pub struct EncoderCache<T: Real> {
    input_shape: (usize, usize, usize, usize),
    cols1: Array2<T>,
    conv1_shape: (usize, usize, usize, usize),
    arg1: Vec<usize>,
    act1: Array4<T>,
    cols2: Array2<T>,
    conv2_shape: (usize, usize, usize, usize),
    arg2: Vec<usize>,
    act2: Array4<T>,
    flat: Array2<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, arch: EncoderArch, role: Role) -> Result<Self> {
        arch.validate()?;
        let (_, (h2, w2)) = arch.stage_dims()?;
        Ok(Self {
            conv1: Conv2d::new(rng, arch.in_channels, arch.conv1, arch.kernel),
            conv2: Conv2d::new(rng, arch.conv1, arch.conv2, arch.kernel),
            fc: Linear::new(rng, arch.conv2 * h2 * w2, arch.feature_dim),
            arch,
            role,
            frozen: false,
        })
    }

    /// Same architecture with every parameter zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            role: self.role,
            frozen: false,
            conv1: Conv2d::zeros(self.conv1.in_channels, self.conv1.out_channels(), self.conv1.kernel),
            conv2: Conv2d::zeros(self.conv2.in_channels, self.conv2.out_channels(), self.conv2.kernel),
            fc: Linear::zeros(self.fc.inputs(), self.fc.outputs()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    fn check_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (self.arch.in_channels, self.arch.height, self.arch.width) {
            return Err(Error::Structural(format!(
                "encoder expects (_, {}, {}, {}) input, got {:?}",
                self.arch.in_channels,
                self.arch.height,
                self.arch.width,
                x.dim()
            )));
        }
        Ok(())
    }

    pub fn forward_train(&self, x: &Array4<T>) -> Result<(Array2<T>, EncoderCache<T>)> {
        self.check_input(x)?;
        let (c1, cols1) = self.conv1.forward(x)?;
        let (p1, arg1) = MaxPool2::forward(&c1);
        let act1 = relu(&p1);
        let (c2, cols2) = self.conv2.forward(&act1)?;
        let (p2, arg2) = MaxPool2::forward(&c2);
        let act2 = relu(&p2);
        let n = act2.dim().0;
        let flat = act2
            .clone()
            .into_shape_with_order((n, act2.len() / n.max(1)))
            .expect("contiguous");
        let features = self.fc.forward(&flat)?;
        Ok((
            features,
            EncoderCache {
                input_shape: x.dim(),
                cols1,
                conv1_shape: c1.dim(),
                arg1,
                act1,
                cols2,
                conv2_shape: c2.dim(),
                arg2,
                act2,
                flat,
            },
        ))
    }

    /// Inference forward: `(batch, feature_dim)`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.forward_train(x).map(|(f, _)| f)
    }

    /// Backpropagates `d_features`. Parameter gradients are computed only when
    /// requested; the input gradient is always returned.
    pub fn backward(
        &self,
        cache: &EncoderCache<T>,
        d_features: &Array2<T>,
        want_params: bool,
    ) -> (Option<Encoder<T>>, Array4<T>) {
        let (g_fc, d_flat) = self.fc.backward(&cache.flat, d_features, want_params, true);
        let d_act2 = d_flat
            .expect("requested")
            .into_shape_with_order(cache.act2.dim())
            .expect("shape");
        let d_p2 = relu_backward(&cache.act2, &d_act2);
        let d_c2 = MaxPool2::backward(&d_p2, &cache.arg2, cache.conv2_shape);
        let (g_c2, d_act1) = self
            .conv2
            .backward(&cache.cols2, cache.act1.dim(), &d_c2, want_params, true);
        let d_p1 = relu_backward(&cache.act1, &d_act1.expect("requested"));
        let d_c1 = MaxPool2::backward(&d_p1, &cache.arg1, cache.conv1_shape);
        let (g_c1, d_x) = self
            .conv1
            .backward(&cache.cols1, cache.input_shape, &d_c1, want_params, true);
        let grads = want_params.then(|| Encoder {
            arch: self.arch.clone(),
            role: self.role,
            frozen: false,
            conv1: g_c1.expect("requested"),
            conv2: g_c2.expect("requested"),
            fc: g_fc.expect("requested"),
        });
        (grads, d_x.expect("requested"))
    }
}

impl<T: Real> Parameters<T> for Encoder<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut v = self.conv1.tensors();
        v.extend(self.conv2.tensors());
        v.extend(self.fc.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v = self.conv1.tensors_mut();
        v.extend(self.conv2.tensors_mut());
        v.extend(self.fc.tensors_mut());
        v
    }

    fn frozen(&self) -> bool {
        self.frozen
    }
}

/// Initializes a target encoder as an independent copy of `src`.
pub fn clone_encoder<T: Real>(src: &Encoder<T>) -> Encoder<T> {
    let mut e = src.clone();
    e.role = Role::Target;
    e.frozen = false;
    e
}

/// ReLU on the encoder features followed by a dense layer to class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Classifier<T: Real> {
    pub frozen: bool,
    pub fc: Linear<T>,
}

pub struct ClassifierCache<T: Real> {
    features: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Real> Classifier<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            frozen: false,
            fc: Linear::new(rng, feature_dim, num_classes),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            frozen: false,
            fc: Linear::zeros(self.fc.inputs(), self.fc.outputs()),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.fc.outputs()
    }

    /// The activation layer feeding the final dense layer.
    pub fn penultimate(&self, features: &Array2<T>) -> Array2<T> {
        relu(features)
    }

    pub fn forward_train(&self, features: &Array2<T>) -> Result<(Array2<T>, ClassifierCache<T>)> {
        let hidden = relu(features);
        let logits = self.fc.forward(&hidden)?;
        Ok((
            logits,
            ClassifierCache {
                features: features.clone(),
                hidden,
            },
        ))
    }

    /// Logits and row-wise softmax probabilities.
    pub fn forward(&self, features: &Array2<T>) -> Result<(Array2<T>, Array2<T>)> {
        let (logits, _) = self.forward_train(features)?;
        let probs = softmax_rows(&logits);
        Ok((logits, probs))
    }

    pub fn backward(
        &self,
        cache: &ClassifierCache<T>,
        d_logits: &Array2<T>,
        want_params: bool,
    ) -> (Option<Classifier<T>>, Array2<T>) {
        let (g, d_hidden) = self.fc.backward(&cache.hidden, d_logits, want_params, true);
        let d_features = relu_backward(&cache.features, &d_hidden.expect("requested"));
        (g.map(|fc| Classifier { frozen: false, fc }), d_features)
    }
}

impl<T: Real> Parameters<T> for Classifier<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        self.fc.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.fc.tensors_mut()
    }

    fn frozen(&self) -> bool {
        self.frozen
    }
}

/// Three dense layers with two ReLU hidden layers and a sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Discriminator<T: Real> {
    pub frozen: bool,
    pub l1: Linear<T>,
    pub l2: Linear<T>,
    pub l3: Linear<T>,
}

pub struct DiscriminatorCache<T: Real> {
    input: Array2<T>,
    a1: Array2<T>,
    a2: Array2<T>,
    prob: Array1<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, feature_dim: usize, hidden: usize) -> Self {
        Self {
            frozen: false,
            l1: Linear::new(rng, feature_dim, hidden),
            l2: Linear::new(rng, hidden, hidden),
            l3: Linear::new(rng, hidden, 1),
        }
    }

    pub fn zeros(feature_dim: usize, hidden: usize) -> Self {
        Self {
            frozen: false,
            l1: Linear::zeros(feature_dim, hidden),
            l2: Linear::zeros(hidden, hidden),
            l3: Linear::zeros(hidden, 1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.l1.inputs(), self.l1.outputs())
    }

    pub fn forward_train(&self, features: &Array2<T>) -> Result<(Array1<T>, DiscriminatorCache<T>)> {
        let a1 = relu(&self.l1.forward(features)?);
        let a2 = relu(&self.l2.forward(&a1)?);
        let z = self.l3.forward(&a2)?;
        let prob = z.column(0).mapv(|v| T::one() / (T::one() + (-v).exp()));
        Ok((
            prob.clone(),
            DiscriminatorCache {
                input: features.clone(),
                a1,
                a2,
                prob,
            },
        ))
    }

    /// Probability that each feature row came from the source domain.
    pub fn forward(&self, features: &Array2<T>) -> Result<Array1<T>> {
        self.forward_train(features).map(|(p, _)| p)
    }

    pub fn backward(
        &self,
        cache: &DiscriminatorCache<T>,
        d_prob: &Array1<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Discriminator<T>>, Option<Array2<T>>) {
        let d_z = (d_prob * &cache.prob.mapv(|p| p * (T::one() - p))).insert_axis(ndarray::Axis(1));
        let (g3, d_a2) = self.l3.backward(&cache.a2, &d_z, want_params, true);
        let d_z2 = relu_backward(&cache.a2, &d_a2.expect("requested"));
        let (g2, d_a1) = self.l2.backward(&cache.a1, &d_z2, want_params, true);
        let d_z1 = relu_backward(&cache.a1, &d_a1.expect("requested"));
        let (g1, d_in) = self.l1.backward(&cache.input, &d_z1, want_params, want_input);
        let grads = want_params.then(|| Discriminator {
            frozen: false,
            l1: g1.expect("requested"),
            l2: g2.expect("requested"),
            l3: g3.expect("requested"),
        });
        (grads, d_in)
    }
}

impl<T: Real> Parameters<T> for Discriminator<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut v = self.l1.tensors();
        v.extend(self.l2.tensors());
        v.extend(self.l3.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.l2.tensors_mut());
        v.extend(self.l3.tensors_mut());
        v
    }

    fn frozen(&self) -> bool {
        self.frozen
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Versioned JSON container for one model role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint<M> {
    pub format_version: u32,
    pub role: String,
    pub seed: u64,
    pub config_fingerprint: String,
    pub model: M,
}

impl<M: Serialize + DeserializeOwned> Checkpoint<M> {
    pub fn new(role: &str, seed: u64, config_fingerprint: &str, model: M) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            role: role.to_string(),
            seed,
            config_fingerprint: config_fingerprint.to_string(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Self = serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if ck.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Serde(format!(
                "{}: checkpoint format {} unsupported",
                path.display(),
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
