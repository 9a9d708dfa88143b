//! Layers with explicit forward/backward passes.
//!
//! Every layer follows the same pattern: `forward` is the inference path and
//! allocates no training state; `forward_train` additionally returns a cache
//! holding whatever the matching `backward` needs. `backward` accumulates
//! parameter gradients in place and returns the gradient w.r.t. the layer
//! input.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

// resolves float math on concrete f64 when building without std
#[allow(unused_imports)]
use num_traits::Float;
use crate::error::{ensure, CoreResult};
use crate::tensor::{Scalar, Tensor};

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

pub(crate) fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        alloc::format!("{prefix}.{name}")
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>, // [out_c, in_c, kh, kw]
    pub bias: Param<T>,   // [out_c]
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// He-normal weights (std = sqrt(2 / fan_in)), zero bias.
    pub fn new<R: Rng>(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_c * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        Conv2d {
            weight: Param::new(Tensor::randn(&[out_c, in_c, k, k], std, rng)),
            bias: Param::new(Tensor::zeros(&[out_c])),
            stride,
            pad,
        }
    }

    /// All-zero weights and bias (used for the attention head's final layer,
    /// giving the 0.5-everywhere sigmoid cold start).
    pub fn zeroed(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::new(Tensor::zeros(&[out_c, in_c, k, k])),
            bias: Param::new(Tensor::zeros(&[out_c])),
            stride,
            pad,
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let kh = self.weight.shape()[2];
        let kw = self.weight.shape()[3];
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    fn run(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let (b, c, h, w) = dims4(x)?;
        let wsh = self.weight.value.shape();
        ensure!(
            c == wsh[1],
            ShapeMismatch,
            "conv expects {} input channels, got {c}",
            wsh[1]
        );
        let (oc, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        ensure!(
            h + 2 * self.pad >= kh && w + 2 * self.pad >= kw,
            ShapeMismatch,
            "conv kernel {kh}x{kw} larger than padded input {h}x{w}"
        );
        let (oh, ow) = self.out_spatial(h, w);
        let cols = im2col(x, kh, kw, self.stride, self.pad, oh, ow);
        // weight viewed as [oc, c*kh*kw]
        let wmat = self.weight.value.clone().reshape(&[oc, c * kh * kw])?;
        let out_mat = wmat.matmul(&cols)?; // [oc, b*oh*ow]
        let mut y = Tensor::zeros(&[b, oc, oh, ow]);
        let l = oh * ow;
        let om = out_mat.data();
        let yd = y.data_mut();
        for bi in 0..b {
            for co in 0..oc {
                let bias = self.bias.value.data()[co];
                let dst = &mut yd[(bi * oc + co) * l..(bi * oc + co + 1) * l];
                let src = &om[co * (b * l) + bi * l..co * (b * l) + (bi + 1) * l];
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d = *s + bias;
                }
            }
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        self.run(x)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, ConvCache<T>)> {
        let y = self.run(x)?;
        Ok((y, ConvCache { x: x.clone() }))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &ConvCache<T>) -> CoreResult<Tensor<T>> {
        let (b, c, h, w) = dims4(&cache.x)?;
        let wsh = self.weight.value.shape().to_vec();
        let (oc, kh, kw) = (wsh[0], wsh[2], wsh[3]);
        let (oh, ow) = self.out_spatial(h, w);
        let l = oh * ow;
        ensure!(
            dy.shape() == [b, oc, oh, ow],
            ShapeMismatch,
            "conv backward got dy {:?}, expected {:?}",
            dy.shape(),
            [b, oc, oh, ow]
        );

        // dy rearranged to [oc, b*l]
        let mut dy_mat = Tensor::zeros(&[oc, b * l]);
        {
            let dm = dy_mat.data_mut();
            let dyd = dy.data();
            for bi in 0..b {
                for co in 0..oc {
                    let src = &dyd[(bi * oc + co) * l..(bi * oc + co + 1) * l];
                    let dst = &mut dm[co * (b * l) + bi * l..co * (b * l) + (bi + 1) * l];
                    dst.copy_from_slice(src);
                }
            }
        }

        let cols = im2col(&cache.x, kh, kw, self.stride, self.pad, oh, ow);
        let dw = dy_mat.matmul_transposed(&cols)?; // [oc, c*kh*kw]
        for (g, d) in self.weight.grad.data_mut().iter_mut().zip(dw.data()) {
            *g += *d;
        }
        {
            let bg = self.bias.grad.data_mut();
            let dm = dy_mat.data();
            for co in 0..oc {
                let mut s = T::zero();
                for v in &dm[co * (b * l)..(co + 1) * (b * l)] {
                    s += *v;
                }
                bg[co] += s;
            }
        }

        let wmat = self.weight.value.clone().reshape(&[oc, c * kh * kw])?;
        let dcols = wmat.t_matmul(&dy_mat)?; // [c*kh*kw, b*l]
        Ok(col2im(
            &dcols,
            b,
            c,
            h,
            w,
            kh,
            kw,
            self.stride,
            self.pad,
            oh,
            ow,
        ))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

impl<T: Scalar> Param<T> {
    fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

pub(crate) fn dims4<T: Scalar>(x: &Tensor<T>) -> CoreResult<(usize, usize, usize, usize)> {
    let s = x.shape();
    ensure!(
        s.len() == 4,
        ShapeMismatch,
        "expected a [batch, channel, h, w] tensor, got {s:?}"
    );
    Ok((s[0], s[1], s[2], s[3]))
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let l = oh * ow;
    let k = c * kh * kw;
    let mut cols = Tensor::zeros(&[k, b * l]);
    let xd = x.data();
    let cd = cols.data_mut();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let row_base = row * (b * l);
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    let col_base = row_base + bi * l;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let dst = col_base + oy * ow;
                        let src = x_base + iy * w;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            cd[dst + ox] = xd[src + (ix - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    dcols: &Tensor<T>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let l = oh * ow;
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    let dd = dcols.data();
    let xd = dx.data_mut();
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let row_base = row * (b * l);
                for bi in 0..b {
                    let x_base = (bi * c + ci) * h * w;
                    let col_base = row_base + bi * l;
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let iy = iy - pad;
                        let dst = x_base + iy * w;
                        let src = col_base + oy * ow;
                        for ox in 0..ow {
                            let ix = ox * stride + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            xd[dst + (ix - pad)] += dd[src + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

pub struct BnCache<T> {
    xc: Tensor<T>,      // x - mean
    inv_std: Vec<T>,    // per channel
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
        }
    }

    /// Inference path: normalize with running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let (b, c, h, w) = dims4(x)?;
        ensure!(
            c == self.gamma.value.numel(),
            ShapeMismatch,
            "batchnorm expects {} channels, got {c}",
            self.gamma.value.numel()
        );
        let mut y = Tensor::zeros(x.shape());
        let sp = h * w;
        let (xd, yd) = (x.data(), y.data_mut());
        for ci in 0..c {
            let inv = (self.running_var.data()[ci] + self.eps).sqrt().recip();
            let mu = self.running_mean.data()[ci];
            let g = self.gamma.value.data()[ci];
            let be = self.beta.value.data()[ci];
            for bi in 0..b {
                let base = (bi * c + ci) * sp;
                for i in base..base + sp {
                    yd[i] = (xd[i] - mu) * inv * g + be;
                }
            }
        }
        Ok(y)
    }

    /// Training path: batch statistics, running stats updated in place.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, BnCache<T>)> {
        let (b, c, h, w) = dims4(x)?;
        let sp = h * w;
        let m = T::from_f64((b * sp) as f64);
        let mut xc = x.clone();
        let mut inv_std = vec![T::zero(); c];
        let mut y = Tensor::zeros(x.shape());
        for ci in 0..c {
            let mut mean = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * sp;
                for i in base..base + sp {
                    mean += x.data()[i];
                }
            }
            mean /= m;
            let mut var = T::zero();
            {
                let xcd = xc.data_mut();
                for bi in 0..b {
                    let base = (bi * c + ci) * sp;
                    for i in base..base + sp {
                        let d = xcd[i] - mean;
                        xcd[i] = d;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let inv = (var + self.eps).sqrt().recip();
            inv_std[ci] = inv;
            let g = self.gamma.value.data()[ci];
            let be = self.beta.value.data()[ci];
            let (xcd, yd) = (xc.data(), y.data_mut());
            for bi in 0..b {
                let base = (bi * c + ci) * sp;
                for i in base..base + sp {
                    yd[i] = xcd[i] * inv * g + be;
                }
            }
            let mom = self.momentum;
            let rm = &mut self.running_mean.data_mut()[ci];
            *rm = *rm * (T::one() - mom) + mean * mom;
            let rv = &mut self.running_var.data_mut()[ci];
            *rv = *rv * (T::one() - mom) + var * mom;
        }
        Ok((y, BnCache { xc, inv_std }))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &BnCache<T>) -> CoreResult<Tensor<T>> {
        let (b, c, h, w) = dims4(&cache.xc)?;
        let sp = h * w;
        let m = T::from_f64((b * sp) as f64);
        let mut dx = Tensor::zeros(cache.xc.shape());
        for ci in 0..c {
            let inv = cache.inv_std[ci];
            let g = self.gamma.value.data()[ci];
            // accumulate sums for dgamma/dbeta and the two reduction terms
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for bi in 0..b {
                let base = (bi * c + ci) * sp;
                for i in base..base + sp {
                    let xhat = cache.xc.data()[i] * inv;
                    sum_dy += dy.data()[i];
                    sum_dy_xhat += dy.data()[i] * xhat;
                }
            }
            self.gamma.grad.data_mut()[ci] += sum_dy_xhat;
            self.beta.grad.data_mut()[ci] += sum_dy;
            // dx = (g*inv/m) * (m*dy - sum_dy - xhat*sum_dy_xhat)
            let scale = g * inv / m;
            let dxd = dx.data_mut();
            for bi in 0..b {
                let base = (bi * c + ci) * sp;
                for i in base..base + sp {
                    let xhat = cache.xc.data()[i] * inv;
                    dxd[i] = scale * (m * dy.data()[i] - sum_dy - xhat * sum_dy_xhat);
                }
            }
        }
        Ok(dx)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "gamma"), &mut self.gamma);
        f(&scoped(prefix, "beta"), &mut self.beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&scoped(prefix, "running_mean"), &mut self.running_mean);
        f(&scoped(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(dy.shape(), y.shape());
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn sigmoid_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= v * (T::one() - v);
    }
    dx
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct PoolCache {
    argmax: Vec<u32>,
    in_shape: Vec<usize>,
}

impl MaxPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d { k, stride, pad }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn run<T: Scalar>(&self, x: &Tensor<T>, mut argmax: Option<&mut Vec<u32>>) -> CoreResult<Tensor<T>> {
        let (b, c, h, w) = dims4(x)?;
        let (oh, ow) = self.out_spatial(h, w);
        let mut y = Tensor::zeros(&[b, c, oh, ow]);
        let xd = x.data();
        let yd = y.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let obase = (bi * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0u32;
                        for ky in 0..self.k {
                            let iy = oy * self.stride + ky;
                            if iy < self.pad || iy >= h + self.pad {
                                continue;
                            }
                            let iy = iy - self.pad;
                            for kx in 0..self.k {
                                let ix = ox * self.stride + kx;
                                if ix < self.pad || ix >= w + self.pad {
                                    continue;
                                }
                                let ix = ix - self.pad;
                                let v = xd[base + iy * w + ix];
                                if v > best {
                                    best = v;
                                    best_idx = (iy * w + ix) as u32;
                                }
                            }
                        }
                        yd[obase + oy * ow + ox] = best;
                        if let Some(am) = argmax.as_deref_mut() {
                            am.push(best_idx);
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        self.run(x, None)
    }

    pub fn forward_train<T: Scalar>(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, PoolCache)> {
        let mut argmax = Vec::with_capacity(x.numel());
        let y = self.run(x, Some(&mut argmax))?;
        Ok((
            y,
            PoolCache {
                argmax,
                in_shape: x.shape().to_vec(),
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, dy: &Tensor<T>, cache: &PoolCache) -> Tensor<T> {
        let mut dx = Tensor::zeros(&cache.in_shape);
        let (c, h, w) = (cache.in_shape[1], cache.in_shape[2], cache.in_shape[3]);
        let per_map = dy.numel() / (cache.in_shape[0] * c);
        let dxd = dx.data_mut();
        for (i, &d) in dy.data().iter().enumerate() {
            let map = i / per_map; // bi*c + ci
            let idx = cache.argmax[i] as usize;
            dxd[map * h * w + idx] += d;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Bilinear 2x upsampling (U-Net decoder)
// ---------------------------------------------------------------------------

/// Per-axis interpolation taps for doubling a length, half-pixel-centre
/// convention (same convention as [`crate::saliency::upsample_bilinear`]).
fn axis_taps2x(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let s = (i as f64 + 0.5) / 2.0 - 0.5;
            let s0 = s.floor();
            let frac = s - s0;
            let i0 = s0.max(0.0) as usize;
            let i0 = i0.min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let frac = if s < 0.0 { 0.0 } else { frac };
            (i0, i1, frac)
        })
        .collect()
}

pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> CoreResult<Tensor<T>> {
    let (b, c, h, w) = dims4(x)?;
    let ty = axis_taps2x(h);
    let tx = axis_taps2x(w);
    let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    let xd = x.data();
    let yd = y.data_mut();
    for map in 0..b * c {
        let ib = map * h * w;
        let ob = map * 4 * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fy = T::from_f64(fy);
                let fx = T::from_f64(fx);
                let v00 = xd[ib + y0 * w + x0];
                let v01 = xd[ib + y0 * w + x1];
                let v10 = xd[ib + y1 * w + x0];
                let v11 = xd[ib + y1 * w + x1];
                let top = v00 + (v01 - v00) * fx;
                let bot = v10 + (v11 - v10) * fx;
                yd[ob + oy * 2 * w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(y)
}

/// Transpose of `upsample2x`: scatter output gradients back through the taps.
pub fn upsample2x_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = axis_taps2x(h);
    let tx = axis_taps2x(w);
    let mut dx = Tensor::zeros(in_shape);
    let dyd = dy.data();
    let dxd = dx.data_mut();
    for map in 0..b * c {
        let ib = map * h * w;
        let ob = map * 4 * h * w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = dyd[ob + oy * 2 * w + ox];
                let fy = T::from_f64(fy);
                let fx = T::from_f64(fx);
                let one = T::one();
                dxd[ib + y0 * w + x0] += g * (one - fy) * (one - fx);
                dxd[ib + y0 * w + x1] += g * (one - fy) * fx;
                dxd[ib + y1 * w + x0] += g * fy * (one - fx);
                dxd[ib + y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>, // [out, in]
    pub bias: Param<T>,   // [out]
}

pub struct LinearCache<T> {
    x: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        Linear {
            weight: Param::new(Tensor::randn(&[out_dim, in_dim], std, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: Param::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    /// x: [batch, in] -> [batch, out]
    pub fn forward(&self, x: &Tensor<T>) -> CoreResult<Tensor<T>> {
        let mut y = x.matmul_transposed(&self.weight.value)?;
        let out = self.bias.value.numel();
        let bd = self.bias.value.data();
        for row in y.data_mut().chunks_exact_mut(out) {
            for (v, b) in row.iter_mut().zip(bd) {
                *v += *b;
            }
        }
        Ok(y)
    }

    pub fn forward_train(&self, x: &Tensor<T>) -> CoreResult<(Tensor<T>, LinearCache<T>)> {
        Ok((self.forward(x)?, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, cache: &LinearCache<T>) -> CoreResult<Tensor<T>> {
        let dw = dy.t_matmul(&cache.x)?; // [out, in]
        for (g, d) in self.weight.grad.data_mut().iter_mut().zip(dw.data()) {
            *g += *d;
        }
        let out = self.bias.value.numel();
        {
            let bg = self.bias.grad.data_mut();
            for row in dy.data().chunks_exact(out) {
                for (g, d) in bg.iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
        dy.matmul(&self.weight.value)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&scoped(prefix, "weight"), &mut self.weight);
        f(&scoped(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Global average pooling, attention gating, row normalization
// ---------------------------------------------------------------------------

/// [b,c,h,w] -> [b,c] spatial mean.
pub fn gap<T: Scalar>(x: &Tensor<T>) -> CoreResult<Tensor<T>> {
    let (b, c, h, w) = dims4(x)?;
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut y = Tensor::zeros(&[b, c]);
    let yd = y.data_mut();
    for (i, chunk) in x.data().chunks_exact(h * w).enumerate() {
        let mut s = T::zero();
        for v in chunk {
            s += *v;
        }
        yd[i] = s * inv;
    }
    debug_assert_eq!(yd.len(), b * c);
    Ok(y)
}

pub fn gap_backward<T: Scalar>(dy: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let inv = T::from_f64(1.0 / (h * w) as f64);
    let mut dx = Tensor::zeros(in_shape);
    for (chunk, &g) in dx.data_mut().chunks_exact_mut(h * w).zip(dy.data()) {
        let v = g * inv;
        for d in chunk {
            *d = v;
        }
    }
    dx
}

/// Broadcast elementwise product: features [b,c,h,w] * map [b,1,h,w].
pub fn gate<T: Scalar>(f: &Tensor<T>, a: &Tensor<T>) -> CoreResult<Tensor<T>> {
    let (b, c, h, w) = dims4(f)?;
    ensure!(
        a.shape() == [b, 1, h, w],
        ShapeMismatch,
        "attention map {:?} does not match features {:?}",
        a.shape(),
        f.shape()
    );
    let mut y = f.clone();
    let sp = h * w;
    let ad = a.data();
    for bi in 0..b {
        let abase = bi * sp;
        for ci in 0..c {
            let base = (bi * c + ci) * sp;
            let yd = y.data_mut();
            for p in 0..sp {
                yd[base + p] *= ad[abase + p];
            }
        }
    }
    Ok(y)
}

/// Returns (d_features, d_map).
pub fn gate_backward<T: Scalar>(
    dy: &Tensor<T>,
    f: &Tensor<T>,
    a: &Tensor<T>,
) -> CoreResult<(Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = dims4(f)?;
    let sp = h * w;
    let mut df = dy.clone();
    let mut da = Tensor::zeros(a.shape());
    let ad = a.data();
    let fd = f.data();
    let dyd = dy.data();
    {
        let dfd = df.data_mut();
        let dad = da.data_mut();
        for bi in 0..b {
            let abase = bi * sp;
            for ci in 0..c {
                let base = (bi * c + ci) * sp;
                for p in 0..sp {
                    dfd[base + p] *= ad[abase + p];
                    dad[abase + p] += dyd[base + p] * fd[base + p];
                }
            }
        }
    }
    Ok((df, da))
}

/// Row-wise L2 normalization of [b,d]; rows below `NORM_GUARD` stay zero.
pub const NORM_GUARD: f64 = 1e-12;

pub struct NormCache<T> {
    e: Tensor<T>,
    norms: Vec<T>,
}

pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
    let d = *x.shape().last().unwrap();
    let mut e = x.clone();
    let mut norms = Vec::with_capacity(x.numel() / d);
    for row in e.data_mut().chunks_exact_mut(d) {
        let mut s = T::zero();
        for v in row.iter() {
            s += *v * *v;
        }
        let n = s.sqrt().max(T::from_f64(NORM_GUARD));
        norms.push(n);
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let cache = NormCache { e: e.clone(), norms };
    (e, cache)
}

pub fn l2_normalize_rows_backward<T: Scalar>(dy: &Tensor<T>, cache: &NormCache<T>) -> Tensor<T> {
    let d = *dy.shape().last().unwrap();
    let mut dx = dy.clone();
    for (ri, row) in dx.data_mut().chunks_exact_mut(d).enumerate() {
        let e = &cache.e.data()[ri * d..(ri + 1) * d];
        let mut dot = T::zero();
        for (g, ev) in row.iter().zip(e) {
            dot += *g * *ev;
        }
        let inv = cache.norms[ri].recip();
        for (g, ev) in row.iter_mut().zip(e) {
            *g = (*g - *ev * dot) * inv;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn fd_check<F: FnMut(&Tensor<f64>) -> f64>(
        x: &Tensor<f64>,
        analytic: &Tensor<f64>,
        mut f: F,
        tol: f64,
    ) {
        let h = 1e-6;
        for i in (0..x.numel()).step_by((x.numel() / 24).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < tol,
                "index {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    /// Scalar objective for gradient checks: weighted sum of outputs.
    fn weighted_sum(y: &Tensor<f64>) -> (f64, Tensor<f64>) {
        let mut s = 0.0;
        let mut dy = Tensor::zeros(y.shape());
        for (i, v) in y.data().iter().enumerate() {
            let wgt = ((i % 7) as f64 - 3.0) * 0.25;
            s += wgt * v;
            dy.data_mut()[i] = wgt;
        }
        (s, dy)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = derive_rng(11, "conv-fd", 0);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, &mut rng);
        let x = Tensor::randn(&[2, 2, 6, 6], 1.0, &mut rng);

        let (y, cache) = conv.forward_train(&x).unwrap();
        let (_, dy) = weighted_sum(&y);
        let mut conv_b = conv.clone();
        let dx = conv_b.backward(&dy, &cache).unwrap();

        // input gradient
        fd_check(
            &x,
            &dx,
            |xt| weighted_sum(&conv.forward(xt).unwrap()).0,
            1e-5,
        );
        // weight gradient
        fd_check(
            &conv.weight.value,
            &conv_b.weight.grad,
            |wt| {
                let mut c2 = conv.clone();
                c2.weight.value = wt.clone();
                weighted_sum(&c2.forward(&x).unwrap()).0
            },
            1e-5,
        );
        // bias gradient
        fd_check(
            &conv.bias.value,
            &conv_b.bias.grad,
            |bt| {
                let mut c2 = conv.clone();
                c2.bias.value = bt.clone();
                weighted_sum(&c2.forward(&x).unwrap()).0
            },
            1e-5,
        );
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut rng = derive_rng(12, "bn-fd", 0);
        let mut bn = BatchNorm2d::<f64>::new(3);
        // non-trivial affine parameters
        bn.gamma.value = Tensor::randn(&[3], 0.5, &mut rng).map(|v| v + 1.0);
        bn.beta.value = Tensor::randn(&[3], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);

        let mut bn_f = bn.clone();
        let (y, cache) = bn_f.forward_train(&x).unwrap();
        let (_, dy) = weighted_sum(&y);
        let mut bn_b = bn.clone();
        let dx = bn_b.backward(&dy, &cache).unwrap();

        fd_check(
            &x,
            &dx,
            |xt| {
                let mut b2 = bn.clone();
                weighted_sum(&b2.forward_train(xt).unwrap().0).0
            },
            1e-4,
        );
        fd_check(
            &bn.gamma.value,
            &bn_b.gamma.grad,
            |gt| {
                let mut b2 = bn.clone();
                b2.gamma.value = gt.clone();
                weighted_sum(&b2.forward_train(&x).unwrap().0).0
            },
            1e-5,
        );
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = derive_rng(13, "linear-fd", 0);
        let lin = Linear::<f64>::new(5, 4, &mut rng);
        let x = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let (y, cache) = lin.forward_train(&x).unwrap();
        let (_, dy) = weighted_sum(&y);
        let mut lin_b = lin.clone();
        let dx = lin_b.backward(&dy, &cache).unwrap();

        fd_check(&x, &dx, |xt| weighted_sum(&lin.forward(xt).unwrap()).0, 1e-6);
        fd_check(
            &lin.weight.value,
            &lin_b.weight.grad,
            |wt| {
                let mut l2 = lin.clone();
                l2.weight.value = wt.clone();
                weighted_sum(&l2.forward(&x).unwrap()).0
            },
            1e-6,
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(
            &[1, 1, 2, 2],
            vec![1.0f64, 3.0, 2.0, 0.5],
        )
        .unwrap();
        let pool = MaxPool2d::new(2, 2, 0);
        let (y, cache) = pool.forward_train(&x).unwrap();
        assert_eq!(y.data(), &[3.0]);
        let dy = Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap();
        let dx = pool.backward(&dy, &cache);
        assert_eq!(dx.data(), &[0.0, 5.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample2x_backward_is_transpose() {
        let mut rng = derive_rng(14, "ups-fd", 0);
        let x = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng);
        let y = upsample2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 6, 6]);
        let (_, dy) = weighted_sum(&y);
        let dx = upsample2x_backward(&dy, x.shape());
        fd_check(&x, &dx, |xt| weighted_sum(&upsample2x(xt).unwrap()).0, 1e-6);
    }

    #[test]
    fn upsample2x_keeps_constant_maps_constant() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 5], 0.5);
        let y = upsample2x(&x).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn gate_and_gap_backward_match_fd() {
        let mut rng = derive_rng(15, "gate-fd", 0);
        let f = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        let a = Tensor::<f64>::randn(&[2, 1, 4, 4], 1.0, &mut rng).map(|v| sigmoid_scalar(v));
        let obj = |ft: &Tensor<f64>, at: &Tensor<f64>| {
            weighted_sum(&gap(&gate(ft, at).unwrap()).unwrap()).0
        };
        let y = gap(&gate(&f, &a).unwrap()).unwrap();
        let (_, dy) = weighted_sum(&y);
        let dgated = gap_backward(&dy, &[2, 3, 4, 4]);
        let (df, da) = gate_backward(&dgated, &f, &a).unwrap();
        fd_check(&f, &df, |ft| obj(ft, &a), 1e-6);
        fd_check(&a, &da, |at| obj(&f, at), 1e-6);
    }

    #[test]
    fn l2_normalize_rows_unit_norm_and_gradient() {
        let mut rng = derive_rng(16, "norm-fd", 0);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let (e, cache) = l2_normalize_rows(&x);
        for row in e.data().chunks_exact(6) {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let (_, dy) = weighted_sum(&e);
        let dx = l2_normalize_rows_backward(&dy, &cache);
        fd_check(&x, &dx, |xt| weighted_sum(&l2_normalize_rows(xt).0).0, 1e-6);
    }

    #[test]
    fn gate_with_ones_is_identity() {
        let mut rng = derive_rng(17, "gate-id", 0);
        let f = Tensor::<f32>::randn(&[1, 4, 3, 3], 1.0, &mut rng);
        let a = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(gate(&f, &a).unwrap().data(), f.data());
    }

    #[test]
    fn gap_arithmetic_oracle() {
        // single channel [[1,3],[5,7]] -> mean 4
        let f = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let y = gap(&f).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }
}
