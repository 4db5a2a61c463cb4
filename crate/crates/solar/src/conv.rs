//! Convolution, activation and normalization primitives for the backbones.
//!
//! Layout is `[h, w, c]` everywhere. Convolutions run as im2col + matrix
//! multiply; the backward pass scatters through the same column mapping.

use ndarray::{Array1, Array2, Array3};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A 2-D convolution layer with square kernel and zero padding.
///
/// The weight is stored im2col-ready as `(k*k*c_in, c_out)`; column index
/// within a patch is `(kr*k + kc)*c_in + ci`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    /// He-style initialization: zero-mean normal with variance
    /// `2 / (k*k*c_in)`, rounded to f32 precision so fresh layers
    /// round-trip exactly through checkpoints. Biases start at zero.
    pub fn init(
        kernel: usize,
        stride: usize,
        padding: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((kernel * kernel * c_in, c_out), |_| {
            normal.sample(rng) as f32 as f64
        });
        ConvLayer { weight, bias: Array1::zeros(c_out), kernel, stride, padding, c_in, c_out }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::validation(format!(
                    "input extent {n} too small for kernel {} with padding {}",
                    self.kernel, self.padding
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    pub fn forward(&self, input: &Array3<f64>) -> Result<Array3<f64>> {
        let (h, w, c) = input.dim();
        if c != self.c_in {
            return Err(Error::validation(format!(
                "conv expects {} input channels, got {c}",
                self.c_in
            )));
        }
        let (oh, ow) = self.output_dims(h, w)?;
        let cols = self.im2col(input, oh, ow);
        let mut flat = cols.dot(&self.weight);
        for mut row in flat.rows_mut() {
            row += &self.bias;
        }
        Ok(flat
            .into_shape_with_order((oh, ow, self.c_out))
            .expect("row-major output locations"))
    }

    /// Gradients w.r.t. input, weight and bias given `d_out` in
    /// `[oh, ow, c_out]` layout.
    pub fn backward(
        &self,
        input: &Array3<f64>,
        d_out: &Array3<f64>,
        want_weight_grads: bool,
    ) -> (Array3<f64>, Option<(Array2<f64>, Array1<f64>)>) {
        let (h, w, _) = input.dim();
        let (oh, ow, _) = d_out.dim();
        let flat = d_out
            .view()
            .into_shape_with_order((oh * ow, self.c_out))
            .expect("row-major gradient");

        let weight_grads = if want_weight_grads {
            let cols = self.im2col(input, oh, ow);
            let d_weight = cols.t().dot(&flat);
            let d_bias = flat.sum_axis(ndarray::Axis(0));
            Some((d_weight, d_bias))
        } else {
            None
        };

        let d_cols = flat.dot(&self.weight.t());
        let d_input = self.col2im(&d_cols, h, w, oh, ow);
        (d_input, weight_grads)
    }

    fn im2col(&self, input: &Array3<f64>, oh: usize, ow: usize) -> Array2<f64> {
        let (h, w, c) = input.dim();
        let k = self.kernel;
        let mut cols = Array2::zeros((oh * ow, k * k * c));
        for or in 0..oh {
            for oc in 0..ow {
                let row = or * ow + oc;
                for kr in 0..k {
                    let ir = (or * self.stride + kr) as isize - self.padding as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for kc in 0..k {
                        let ic = (oc * self.stride + kc) as isize - self.padding as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        let base = (kr * k + kc) * c;
                        for ci in 0..c {
                            cols[[row, base + ci]] = input[[ir as usize, ic as usize, ci]];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, d_cols: &Array2<f64>, h: usize, w: usize, oh: usize, ow: usize) -> Array3<f64> {
        let c = self.c_in;
        let k = self.kernel;
        let mut d_input = Array3::zeros((h, w, c));
        for or in 0..oh {
            for oc in 0..ow {
                let row = or * ow + oc;
                for kr in 0..k {
                    let ir = (or * self.stride + kr) as isize - self.padding as isize;
                    if ir < 0 || ir >= h as isize {
                        continue;
                    }
                    for kc in 0..k {
                        let ic = (oc * self.stride + kc) as isize - self.padding as isize;
                        if ic < 0 || ic >= w as isize {
                            continue;
                        }
                        let base = (kr * k + kc) * c;
                        for ci in 0..c {
                            d_input[[ir as usize, ic as usize, ci]] += d_cols[[row, base + ci]];
                        }
                    }
                }
            }
        }
        d_input
    }
}

/// Rectified linear unit; never emits negative zero.
pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// ReLU backward: the mask comes from the pre-activation values.
pub fn relu_backward(pre_activation: &Array3<f64>, d_out: &Array3<f64>) -> Array3<f64> {
    let mut d = d_out.clone();
    d.zip_mut_with(pre_activation, |g, &x| {
        if x <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Variance floor for [`instance_standardize`].
pub const INSTNORM_EPS: f64 = 1e-5;

/// Cache for the instance-standardization backward pass.
#[derive(Debug, Clone)]
pub struct InstNormCache {
    /// normalized output, reused as x-hat
    normalized: Array3<f64>,
    /// per-channel sqrt(var + eps)
    sigma: Array1<f64>,
}

/// Standardize each channel to zero mean and unit variance over the
/// spatial extent. Batch-free and deterministic.
pub fn instance_standardize(x: &Array3<f64>) -> (Array3<f64>, InstNormCache) {
    let (h, w, c) = x.dim();
    let n = (h * w) as f64;
    let mut out = x.clone();
    let mut sigma = Array1::zeros(c);
    for ch in 0..c {
        let mut mean = 0.0;
        for r in 0..h {
            for col in 0..w {
                mean += x[[r, col, ch]];
            }
        }
        mean /= n;
        let mut var = 0.0;
        for r in 0..h {
            for col in 0..w {
                let d = x[[r, col, ch]] - mean;
                var += d * d;
            }
        }
        var /= n;
        let s = (var + INSTNORM_EPS).sqrt();
        sigma[ch] = s;
        for r in 0..h {
            for col in 0..w {
                out[[r, col, ch]] = (x[[r, col, ch]] - mean) / s;
            }
        }
    }
    let cache = InstNormCache { normalized: out.clone(), sigma };
    (out, cache)
}

/// Backward pass of [`instance_standardize`].
pub fn instance_standardize_backward(cache: &InstNormCache, d_out: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = cache.normalized.dim();
    let n = (h * w) as f64;
    let mut d_in = Array3::zeros((h, w, c));
    for ch in 0..c {
        let mut mean_dy = 0.0;
        let mut mean_dy_xhat = 0.0;
        for r in 0..h {
            for col in 0..w {
                mean_dy += d_out[[r, col, ch]];
                mean_dy_xhat += d_out[[r, col, ch]] * cache.normalized[[r, col, ch]];
            }
        }
        mean_dy /= n;
        mean_dy_xhat /= n;
        let s = cache.sigma[ch];
        for r in 0..h {
            for col in 0..w {
                let xhat = cache.normalized[[r, col, ch]];
                d_in[[r, col, ch]] =
                    (d_out[[r, col, ch]] - mean_dy - xhat * mean_dy_xhat) / s;
            }
        }
    }
    d_in
}
