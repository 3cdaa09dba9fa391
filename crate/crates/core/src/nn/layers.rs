use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};
use crate::scalar::Real;

fn fan_in_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, len: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Linear<T: Real> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize) -> Self {
        let weight =
            Array2::from_shape_vec((outputs, inputs), fan_in_uniform(rng, inputs, inputs * outputs)).expect("shape");
        let bias = Array1::from(fan_in_uniform(rng, inputs, outputs));
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<T>) -> Result<Array2<T>> {
        if x.ncols() != self.inputs() {
            return Err(Error::Structural(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Returns `(param grads, input grad)`; either half can be skipped.
    pub fn backward(
        &self,
        x: &Array2<T>,
        d_out: &Array2<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Linear<T>>, Option<Array2<T>>) {
        let grads = want_params.then(|| Linear {
            weight: d_out.t().dot(x),
            bias: d_out.sum_axis(Axis(0)),
        });
        let d_in = want_input.then(|| d_out.dot(&self.weight));
        (grads, d_in)
    }
}

impl<T: Real> Parameters<T> for Linear<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

/// Square-kernel, stride-1, unpadded convolution computed through im2col.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Conv2d<T: Real> {
    /// `(out_channels, in_channels * k * k)`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub in_channels: usize,
    pub kernel: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = Array2::from_shape_vec(
            (out_channels, fan_in),
            fan_in_uniform(rng, fan_in, fan_in * out_channels),
        )
        .expect("shape");
        let bias = Array1::from(fan_in_uniform(rng, fan_in, out_channels));
        Self {
            weight,
            bias,
            in_channels,
            kernel,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
            in_channels,
            kernel,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn im2col(&self, x: &Array4<T>) -> Array2<T> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let width = c * k * k;
        let mut cols = vec![T::zero(); n * oh * ow * width];
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((img * oh + oy) * ow + ox) * width;
                    for ch in 0..c {
                        for ky in 0..k {
                            let base = ((img * c + ch) * h + oy + ky) * w + ox;
                            let dst = row + (ch * k + ky) * k;
                            cols[dst..dst + k].copy_from_slice(&src[base..base + k]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((n * oh * ow, width), cols).expect("shape")
    }

    fn col2im(&self, dcols: &Array2<T>, shape: (usize, usize, usize, usize)) -> Array4<T> {
        let (n, c, h, w) = shape;
        let k = self.kernel;
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let width = c * k * k;
        let dcols = dcols.as_standard_layout();
        let src = dcols.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); n * c * h * w];
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((img * oh + oy) * ow + ox) * width;
                    for ch in 0..c {
                        for ky in 0..k {
                            let base = ((img * c + ch) * h + oy + ky) * w + ox;
                            let from = row + (ch * k + ky) * k;
                            for kx in 0..k {
                                out[base + kx] = out[base + kx] + src[from + kx];
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec((n, c, h, w), out).expect("shape")
    }

    /// Returns the output together with the im2col matrix needed by `backward`.
    pub fn forward(&self, x: &Array4<T>) -> Result<(Array4<T>, Array2<T>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels || h < self.kernel || w < self.kernel {
            return Err(Error::Structural(format!(
                "conv layer expects {} channels and at least {}x{} input, got {:?}",
                self.in_channels,
                self.kernel,
                self.kernel,
                x.dim()
            )));
        }
        let (oh, ow) = (h + 1 - self.kernel, w + 1 - self.kernel);
        let cols = self.im2col(x);
        let out = cols.dot(&self.weight.t()) + &self.bias;
        let out = out
            .into_shape_with_order((n, oh, ow, self.out_channels()))
            .expect("shape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .into_owned();
        Ok((out, cols))
    }

    pub fn backward(
        &self,
        cols: &Array2<T>,
        input_shape: (usize, usize, usize, usize),
        d_out: &Array4<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Conv2d<T>>, Option<Array4<T>>) {
        let (n, oc, oh, ow) = d_out.dim();
        let d2 = d_out
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * oh * ow, oc))
            .expect("shape");
        let grads = want_params.then(|| Conv2d {
            weight: d2.t().dot(cols),
            bias: d2.sum_axis(Axis(0)),
            in_channels: self.in_channels,
            kernel: self.kernel,
        });
        let d_in = want_input.then(|| self.col2im(&d2.dot(&self.weight), input_shape));
        (grads, d_in)
    }
}

impl<T: Real> Parameters<T> for Conv2d<T> {
    fn tensors(&self) -> Vec<ArrayViewD<'_, T>> {
        vec![self.weight.view().into_dyn(), self.bias.view().into_dyn()]
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        vec![self.weight.view_mut().into_dyn(), self.bias.view_mut().into_dyn()]
    }
}

/// 2x2 max pooling with stride 2. Ties resolve to the first element scanned.
#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2;

impl MaxPool2 {
    /// Returns pooled output and, per output cell, the flat input index of its max.
    pub fn forward<T: Real>(x: &Array4<T>) -> (Array4<T>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let (ph, pw) = (h / 2, w / 2);
        let x = x.as_standard_layout();
        let src = x.as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * c * ph * pw);
        let mut arg = Vec::with_capacity(n * c * ph * pw);
        for plane in 0..n * c {
            let base = plane * h * w;
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = base + 2 * py * w + 2 * px;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * py + dy) * w + 2 * px + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    arg.push(best);
                }
            }
        }
        (Array4::from_shape_vec((n, c, ph, pw), out).expect("shape"), arg)
    }

    pub fn backward<T: Real>(
        d_out: &Array4<T>,
        argmax: &[usize],
        input_shape: (usize, usize, usize, usize),
    ) -> Array4<T> {
        let (n, c, h, w) = input_shape;
        let mut d_in = vec![T::zero(); n * c * h * w];
        for (g, &idx) in d_out.iter().zip(argmax) {
            d_in[idx] = d_in[idx] + *g;
        }
        Array4::from_shape_vec(input_shape, d_in).expect("shape")
    }
}

pub fn relu<T: Real, D: ndarray::Dimension>(x: &ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its (pre- or post-activation) input.
pub fn relu_backward<T: Real, D: ndarray::Dimension>(
    activation: &ndarray::Array<T, D>,
    d_out: &ndarray::Array<T, D>,
) -> ndarray::Array<T, D> {
    let mut d = d_out.clone();
    d.zip_mut_with(activation, |g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
    d
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let k = conv.kernel;
        let (oh, ow) = (h + 1 - k, w + 1 - k);
        let mut out = Array4::zeros((n, conv.out_channels(), oh, ow));
        for img in 0..n {
            for o in 0..conv.out_channels() {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = conv.bias[o];
                        for ch in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    acc += conv.weight[[o, (ch * k + ky) * k + kx]] * x[[img, ch, y + ky, xx + kx]];
                                }
                            }
                        }
                        out[[img, o, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_input(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3);
        let x = random_input(&mut rng, (2, 2, 6, 5));
        let (fast, _) = conv.forward(&x).unwrap();
        let slow = naive_conv(&conv, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::<f64>::new(&mut rng, 2, 2, 3);
        let x = random_input(&mut rng, (1, 2, 5, 5));
        let probe = random_input(&mut rng, (1, 2, 3, 3));
        let objective = |x: &Array4<f64>| (conv.forward(x).unwrap().0 * &probe).sum();
        let (_, cols) = conv.forward(&x).unwrap();
        let (grads, d_in) = conv.backward(&cols, x.dim(), &probe, true, true);
        let d_in = d_in.unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - d_in[idx]).abs() < 1e-6, "{fd} vs {}", d_in[idx]);
        }
        let grads = grads.unwrap();
        let mut shifted = conv.clone();
        shifted.weight[[1, 4]] += h;
        let up = (shifted.forward(&x).unwrap().0 * &probe).sum();
        shifted.weight[[1, 4]] -= 2.0 * h;
        let down = (shifted.forward(&x).unwrap().0 * &probe).sum();
        assert!(((up - down) / (2.0 * h) - grads.weight[[1, 4]]).abs() < 1e-6);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 0.0, 1.0]).unwrap();
        let (out, arg) = MaxPool2::forward(&x);
        assert_eq!(out.as_slice().unwrap(), &[5.0, 2.0]);
        let d = MaxPool2::backward(&Array4::from_elem((1, 1, 1, 2), 1.0), &arg, x.dim());
        assert_eq!(d.slice(s![0, 0, .., ..]).sum(), 2.0);
        assert_eq!(d[[0, 0, 0, 1]], 1.0);
        // tie between 2.0 and 2.0 goes to the first scanned element
        assert_eq!(d[[0, 0, 0, 2]], 1.0);
    }

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let p = softmax_rows(&Array2::<f64>::zeros((1, 10)));
        for v in p.iter() {
            assert!((v - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let l = Linear::<f32>::zeros(4, 2);
        assert!(matches!(l.forward(&Array2::zeros((3, 5))), Err(Error::Structural(_))));
    }
}
