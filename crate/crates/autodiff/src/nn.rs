//! Layer compositions on top of the raw tape ops: convolutions with
//! TensorFlow-style `same` padding, their transposed counterparts, dense
//! layers, and batch normalization assembled from primitives so that its
//! adjoint stays differentiable.
//!
//! Convolution weights are stored pre-flattened for the patch-matrix
//! product: a forward kernel is `[c_out, c_in*k]` (1-d) or
//! `[c_out, c_in*k*k]` (2-d); a transposed kernel is `[c_in, c_out*k]`
//! or `[c_in, c_out*k*k]`, the layout of the convolution it is adjoint to.

use crate::graph::{Graph, PatchGeom1d, PatchGeom2d, Var};
use ndarray::Array1;

/// Output size and padding split for `same` convolution: `out = ceil(in/s)`,
/// total padding `max((out-1)*s + k - in, 0)` split low-side-first.
pub fn same_pad(in_dim: usize, k: usize, stride: usize) -> (usize, usize, usize) {
    let out = in_dim.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(in_dim);
    let before = total / 2;
    (out, before, total - before)
}

pub fn conv1d_geom(c: usize, w: usize, k: usize, stride: usize) -> PatchGeom1d {
    let (w_out, pad_left, _) = same_pad(w, k, stride);
    PatchGeom1d { c, w, k, stride, pad_left, w_out }
}

pub fn conv2d_geom(c: usize, h: usize, w: usize, k: usize, stride: usize) -> PatchGeom2d {
    let (h_out, pad_top, _) = same_pad(h, k, stride);
    let (w_out, pad_left, _) = same_pad(w, k, stride);
    PatchGeom2d { c, h, w, k, stride, pad_top, pad_left, h_out, w_out }
}

/// `x: [c_in, w]`, `weight: [c_out, c_in*k]`, `bias: [c_out]` -> `[c_out, ceil(w/s)]`.
pub fn conv1d(g: &mut Graph, x: Var, weight: Var, bias: Var, k: usize, stride: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 2, "conv1d input must be [c, w]");
    let geom = conv1d_geom(shape[0], shape[1], k, stride);
    let cols = g.im2col1d(x, geom);
    let y = g.matmul(weight, cols, false, false);
    let c_out = g.value(weight).shape()[0];
    let yb = g.channel_to_shape(bias, &[c_out, geom.w_out]);
    g.add(y, yb)
}

/// Transposed 1-d convolution upsampling by `stride`:
/// `x: [c_in, w_in]`, `weight: [c_in, c_out*k]`, `bias: [c_out]` -> `[c_out, w_in*stride]`.
pub fn deconv1d(g: &mut Graph, x: Var, weight: Var, bias: Var, k: usize, stride: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 2, "deconv1d input must be [c, w]");
    let (c_in, w_in) = (shape[0], shape[1]);
    let c_out = g.value(weight).shape()[1] / k;
    let w_full = w_in * stride;
    let geom = conv1d_geom(c_out, w_full, k, stride);
    assert_eq!(geom.w_out, w_in, "deconv1d geometry mismatch");
    assert_eq!(g.value(weight).shape()[0], c_in, "deconv1d weight shape");
    let cols = g.matmul(weight, x, true, false);
    let y = g.col2im1d(cols, geom);
    let yb = g.channel_to_shape(bias, &[c_out, w_full]);
    g.add(y, yb)
}

/// `x: [c_in, h, w]`, `weight: [c_out, c_in*k*k]`, `bias: [c_out]`.
pub fn conv2d(g: &mut Graph, x: Var, weight: Var, bias: Var, k: usize, stride: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "conv2d input must be [c, h, w]");
    let geom = conv2d_geom(shape[0], shape[1], shape[2], k, stride);
    let cols = g.im2col2d(x, geom);
    let y = g.matmul(weight, cols, false, false);
    let c_out = g.value(weight).shape()[0];
    let y = g.reshape(y, &[c_out, geom.h_out, geom.w_out]);
    let yb = g.channel_to_shape(bias, &[c_out, geom.h_out, geom.w_out]);
    g.add(y, yb)
}

/// Transposed 2-d convolution upsampling both spatial axes by `stride`:
/// `x: [c_in, h_in, w_in]`, `weight: [c_in, c_out*k*k]`, `bias: [c_out]`.
pub fn deconv2d(g: &mut Graph, x: Var, weight: Var, bias: Var, k: usize, stride: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "deconv2d input must be [c, h, w]");
    let (c_in, h_in, w_in) = (shape[0], shape[1], shape[2]);
    let c_out = g.value(weight).shape()[1] / (k * k);
    let (h_full, w_full) = (h_in * stride, w_in * stride);
    let geom = conv2d_geom(c_out, h_full, w_full, k, stride);
    assert_eq!((geom.h_out, geom.w_out), (h_in, w_in), "deconv2d geometry mismatch");
    assert_eq!(g.value(weight).shape()[0], c_in, "deconv2d weight shape");
    let x_flat = g.reshape(x, &[c_in, h_in * w_in]);
    let cols = g.matmul(weight, x_flat, true, false);
    let y = g.col2im2d(cols, geom);
    let yb = g.channel_to_shape(bias, &[c_out, h_full, w_full]);
    g.add(y, yb)
}

/// `weight: [rows, cols]`, `x: [cols]`, `bias: [rows]` -> `[rows]`.
pub fn dense(g: &mut Graph, weight: Var, bias: Var, x: Var) -> Var {
    let y = g.matvec(weight, x, false);
    g.add(y, bias)
}

/// Per-channel normalization over the non-leading axes with learned scale
/// and shift. Returns the output together with the batch mean and biased
/// batch variance as plain arrays for running-statistic updates.
pub fn batchnorm_train(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Var, Array1<f64>, Array1<f64>) {
    let (mut ys, mean, var) = batchnorm_train_joint(g, &[x], gamma, beta, eps);
    (ys.pop().unwrap(), mean, var)
}

/// Batch normalization over a group of same-shape tensors that together
/// form the batch: one shared per-channel mean and biased variance over
/// every tensor's non-leading axes, applied to each member. Gradients flow
/// into every member through the shared statistics. The single-tensor case
/// reduces to [`batchnorm_train`].
pub fn batchnorm_train_joint(
    g: &mut Graph,
    xs: &[Var],
    gamma: Var,
    beta: Var,
    eps: f64,
) -> (Vec<Var>, Array1<f64>, Array1<f64>) {
    assert!(!xs.is_empty(), "batch normalization needs at least one tensor");
    let shape = g.value(xs[0]).shape().to_vec();
    let k = xs.len() as f64;

    let mut mean_sum = g.channel_mean(xs[0]);
    for &x in &xs[1..] {
        debug_assert_eq!(g.value(x).shape(), shape.as_slice());
        let m = g.channel_mean(x);
        mean_sum = g.add(mean_sum, m);
    }
    let mean = g.scale(mean_sum, 1.0 / k);
    let mean_b = g.channel_to_shape(mean, &shape);

    let centered: Vec<Var> = xs.iter().map(|&x| g.sub(x, mean_b)).collect();
    let mut var_sum = {
        let sq = g.square(centered[0]);
        g.channel_mean(sq)
    };
    for &c in &centered[1..] {
        let sq = g.square(c);
        let v = g.channel_mean(sq);
        var_sum = g.add(var_sum, v);
    }
    let var = g.scale(var_sum, 1.0 / k);
    let var_eps = g.add_scalar(var, eps);
    let std = g.sqrt(var_eps);
    let inv = g.recip(std);
    let inv_b = g.channel_to_shape(inv, &shape);
    let gamma_b = g.channel_to_shape(gamma, &shape);
    let beta_b = g.channel_to_shape(beta, &shape);
    let ys = centered
        .iter()
        .map(|&c| {
            let xhat = g.mul(c, inv_b);
            let scaled = g.mul(xhat, gamma_b);
            g.add(scaled, beta_b)
        })
        .collect();
    let mean_val = g
        .value(mean)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned();
    let var_val = g
        .value(var)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .unwrap()
        .to_owned();
    (ys, mean_val, var_val)
}

/// Batch normalization against frozen statistics.
pub fn batchnorm_eval(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &Array1<f64>,
    var: &Array1<f64>,
    eps: f64,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    let mean_c = g.constant(mean.clone().into_dyn());
    let inv: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
    let inv_c = g.constant(inv.into_dyn());
    let mean_b = g.channel_to_shape(mean_c, &shape);
    let inv_b = g.channel_to_shape(inv_c, &shape);
    let centered = g.sub(x, mean_b);
    let xhat = g.mul(centered, inv_b);
    let gamma_b = g.channel_to_shape(gamma, &shape);
    let beta_b = g.channel_to_shape(beta, &shape);
    let scaled = g.mul(xhat, gamma_b);
    g.add(scaled, beta_b)
}

/// Multiply by a precomputed inverted-dropout mask (entries `0` or `1/keep`).
pub fn apply_mask(g: &mut Graph, x: Var, mask: ndarray::ArrayD<f64>) -> Var {
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Mean squared difference of two same-shaped tensors, as a scalar node.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let sq = g.square(d);
    g.mean_all(sq)
}

/// Sum of squared entries, as a scalar node.
pub fn sum_sq(g: &mut Graph, x: Var) -> Var {
    let sq = g.square(x);
    g.sum_all(sq)
}

/// Arithmetic mean of scalar nodes.
pub fn mean_of(g: &mut Graph, parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "mean of zero scalars");
    let mut acc = parts[0];
    for &p in &parts[1..] {
        acc = g.add(acc, p);
    }
    g.scale(acc, 1.0 / parts.len() as f64)
}
