//! Forward and analytic-backward kernels for the three layer types the
//! decoder is built from: fully-connected, 3x3 same-padded convolution and
//! ReLU.
//!
//! Everything here is a pure function of its arguments. Backward passes
//! recompute whatever they need from the forward input instead of relying on
//! hidden caches.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial size of every convolution kernel.
pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Gradient of a layer's output, contracted with an upstream gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad<T> {
    pub d_input: Tensor<T>,
    /// One entry per parameter tensor, in the layer's parameter order.
    pub d_params: Vec<Tensor<T>>,
}

/// `out[j] = sum_i weight[j, i] * input[i] + bias[j]`.
pub fn fc_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n_out, n_in) = fc_dims(input, weight, bias)?;
    let mut out = bias.data().to_vec();
    T::gemm(
        n_out,
        n_in,
        1,
        T::one(),
        weight.data(),
        n_in as isize,
        1,
        input.data(),
        1,
        1,
        T::one(),
        &mut out,
        1,
        1,
    );
    Ok(Tensor::from_vec(out))
}

/// Gradients of [`fc_forward`]; `d_params` is `[d_weight, d_bias]`.
pub fn fc_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let (n_out, n_in) = fc_dims(input, weight, bias)?;
    upstream.expect_shape(&[n_out], "fc_backward upstream")?;
    let g = upstream.data();
    let x = input.data();

    let mut d_weight = vec![T::zero(); n_out * n_in];
    for (row, &gj) in d_weight.chunks_exact_mut(n_in).zip(g) {
        if gj != T::zero() {
            for (d, &xi) in row.iter_mut().zip(x) {
                *d = gj * xi;
            }
        }
    }

    let mut d_input = vec![T::zero(); n_in];
    T::gemm(
        n_in,
        n_out,
        1,
        T::one(),
        weight.data(),
        1,
        n_in as isize,
        g,
        1,
        1,
        T::zero(),
        &mut d_input,
        1,
        1,
    );

    Ok(LayerGrad {
        d_input: Tensor::from_vec(d_input),
        d_params: vec![Tensor::new(&[n_out, n_in], d_weight)?, upstream.clone()],
    })
}

fn fc_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize)> {
    let &[n_out, n_in] = weight.shape() else {
        return Err(Error::dim("fc weight rank", 2, weight.shape().len()));
    };
    if input.len() != n_in {
        return Err(Error::dim("fc input", n_in, input.len()));
    }
    bias.expect_shape(&[n_out], "fc bias")?;
    Ok((n_out, n_in))
}

/// Shape bookkeeping for a convolution call.
#[derive(Clone, Copy, Debug)]
struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvDims> {
    let &[c_in, h, w] = input.shape() else {
        return Err(Error::dim("conv2d input rank", 3, input.shape().len()));
    };
    let &[c_out, k_in, kh, kw] = kernels.shape() else {
        return Err(Error::dim("conv2d kernel rank", 4, kernels.shape().len()));
    };
    if (kh, kw) != (KERNEL, KERNEL) {
        return Err(Error::dim(
            "conv2d kernel size",
            "3x3",
            format!("{kh}x{kw}"),
        ));
    }
    if k_in != c_in {
        return Err(Error::dim("conv2d input channels", k_in, c_in));
    }
    bias.expect_shape(&[c_out], "conv2d bias")?;
    Ok(ConvDims { c_in, c_out, h, w })
}

/// Unfolds a `[c, h, w]` input into `[c * 9, h * w]` patch columns with zero
/// padding, so a same-padded 3x3 convolution becomes one matrix product.
fn im2col<T: Scalar>(x: &[T], c_in: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c_in * TAPS * hw];
    for c in 0..c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((c * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let src = &plane[(sy - 1) * w..sy * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    for xx in x_lo..x_hi {
                        dst[xx] = src[xx + kx - 1];
                    }
                }
            }
        }
    }
    col
}

/// Inverse scatter of [`im2col`], accumulating overlapping taps.
fn col2im<T: Scalar>(col: &[T], c_in: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut x = vec![T::zero(); c_in * hw];
    for c in 0..c_in {
        let plane = &mut x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((c * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                let (x_lo, x_hi) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for y in 0..h {
                    let sy = y + ky;
                    if sy < 1 || sy > h {
                        continue;
                    }
                    let dst = &mut plane[(sy - 1) * w..sy * w];
                    let src = &row[y * w..(y + 1) * w];
                    for xx in x_lo..x_hi {
                        dst[xx + kx - 1] += src[xx];
                    }
                }
            }
        }
    }
    x
}

/// Same-padded 3x3 cross-correlation: `[c_in, h, w] -> [c_out, h, w]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernels, bias)?;
    let hw = d.h * d.w;
    let col = im2col(input.data(), d.c_in, d.h, d.w);
    let mut out = Vec::with_capacity(d.c_out * hw);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, hw));
    }
    let k = d.c_in * TAPS;
    T::gemm(
        d.c_out,
        k,
        hw,
        T::one(),
        kernels.data(),
        k as isize,
        1,
        &col,
        hw as isize,
        1,
        T::one(),
        &mut out,
        hw as isize,
        1,
    );
    Tensor::new(&[d.c_out, d.h, d.w], out)
}

/// Gradients of [`conv2d_forward`]; `d_params` is `[d_kernels, d_bias]`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<LayerGrad<T>> {
    let d = conv_dims(input, kernels, bias)?;
    upstream.expect_shape(&[d.c_out, d.h, d.w], "conv2d_backward upstream")?;
    let hw = d.h * d.w;
    let k = d.c_in * TAPS;
    let g = upstream.data();
    let col = im2col(input.data(), d.c_in, d.h, d.w);

    // d_kernels = g . col^T
    let mut d_kernels = vec![T::zero(); d.c_out * k];
    T::gemm(
        d.c_out,
        hw,
        k,
        T::one(),
        g,
        hw as isize,
        1,
        &col,
        1,
        hw as isize,
        T::zero(),
        &mut d_kernels,
        k as isize,
        1,
    );
    let d_bias: Vec<T> = g
        .chunks_exact(hw)
        .map(|ch| ch.iter().copied().sum())
        .collect();

    // d_col = kernels^T . g
    let mut d_col = vec![T::zero(); k * hw];
    T::gemm(
        k,
        d.c_out,
        hw,
        T::one(),
        kernels.data(),
        1,
        k as isize,
        g,
        hw as isize,
        1,
        T::zero(),
        &mut d_col,
        hw as isize,
        1,
    );
    let d_input = col2im(&d_col, d.c_in, d.h, d.w);

    Ok(LayerGrad {
        d_input: Tensor::new(&[d.c_in, d.h, d.w], d_input)?,
        d_params: vec![
            Tensor::new(&[d.c_out, d.c_in, KERNEL, KERNEL], d_kernels)?,
            Tensor::from_vec(d_bias),
        ],
    })
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// ReLU has no parameters, so `d_params` is empty. The derivative at 0 is
/// taken as 0.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrad<T>> {
    let d_input = input.zip_map(upstream, |x, g| if x > T::zero() { g } else { T::zero() })?;
    Ok(LayerGrad {
        d_input,
        d_params: Vec::new(),
    })
}

/// A fully-connected layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    /// `[n_out, n_in]`
    pub weight: Tensor<T>,
    /// `[n_out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_out, n_in]),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    /// Gaussian weights with variance `gain / n_in`, zero bias.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[n_out, n_in], (gain / n_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        fc_forward(input, &self.weight, &self.bias)
    }

    pub fn backward(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrad<T>> {
        fc_backward(input, &self.weight, &self.bias, upstream)
    }
}

/// A 3x3 same-padded convolution's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    /// `[c_out, c_in, 3, 3]`
    pub kernels: Tensor<T>,
    /// `[c_out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            kernels: Tensor::zeros(&[c_out, c_in, KERNEL, KERNEL]),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    /// He-style Gaussian kernels with variance `gain / (9 c_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (c_in * TAPS) as f64;
        Self {
            kernels: Tensor::randn(&[c_out, c_in, KERNEL, KERNEL], (gain / fan_in).sqrt(), rng),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_forward(input, &self.kernels, &self.bias)
    }

    pub fn backward(&self, input: &Tensor<T>, upstream: &Tensor<T>) -> Result<LayerGrad<T>> {
        conv2d_backward(input, &self.kernels, &self.bias, upstream)
    }
}
