//! Layer kernels: SAME-padded 1-D convolution, batch normalization, ReLU,
//! global average pooling, dense projection and softmax.
//!
//! The `*_forward` functions taking [`Tensor3`] are the standalone entry
//! points; the model uses the position-major `Matrix` variants directly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::gemm::{matmul, View};
use crate::tensor::{Matrix, Tensor3};

/// Left zero-padding for a SAME convolution of width `k`; even widths put the
/// extra element on the left.
pub fn same_pad_left(k: usize) -> usize {
    k / 2
}

/// Convolution parameters, weights laid out `[out, in, k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv1d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        let c = Self {
            in_channels,
            out_channels,
            kernel,
            weight,
            bias,
        };
        c.validate()?;
        Ok(c)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.kernel == 0 {
            return Err(shape_err("Conv1d", "kernel >= 1", "0"));
        }
        let w = self.out_channels * self.in_channels * self.kernel;
        if self.weight.len() != w {
            return Err(shape_err("Conv1d weight", format!("{w}"), format!("{}", self.weight.len())));
        }
        if self.bias.len() != self.out_channels {
            return Err(shape_err("Conv1d bias", format!("{}", self.out_channels), format!("{}", self.bias.len())));
        }
        Ok(())
    }

    fn patch_width(&self) -> usize {
        self.in_channels * self.kernel
    }

    /// Unfolds `x` (`[batch*len, in]`) into patches `[batch*len, in*k]`,
    /// column `c*k + j` holding `x[t + j - pad_left, c]`.
    pub(crate) fn im2col(&self, x: &Matrix, batch: usize, len: usize) -> Matrix {
        let (cin, k) = (self.in_channels, self.kernel);
        let pw = self.patch_width();
        let pad = same_pad_left(k) as isize;
        let mut cols = Matrix::zeros(batch * len, pw);
        if batch * len == 0 {
            return cols;
        }
        cols.data.par_chunks_mut(len * pw).enumerate().for_each(|(b, sample)| {
            for t in 0..len {
                let row = &mut sample[t * pw..(t + 1) * pw];
                for j in 0..k {
                    let src = t as isize + j as isize - pad;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xr = x.row(b * len + src as usize);
                    for c in 0..cin {
                        row[c * k + j] = xr[c];
                    }
                }
            }
        });
        cols
    }

    /// Adjoint of [`Conv1d::im2col`].
    pub(crate) fn col2im(&self, dcols: &Matrix, batch: usize, len: usize) -> Matrix {
        let (cin, k) = (self.in_channels, self.kernel);
        let pad = same_pad_left(k) as isize;
        let mut dx = Matrix::zeros(batch * len, cin);
        if batch * len == 0 {
            return dx;
        }
        dx.data.par_chunks_mut(len * cin).enumerate().for_each(|(b, sample)| {
            for t in 0..len {
                let prow = dcols.row(b * len + t);
                for j in 0..k {
                    let dst = t as isize + j as isize - pad;
                    if dst < 0 || dst >= len as isize {
                        continue;
                    }
                    let out = &mut sample[dst as usize * cin..(dst as usize + 1) * cin];
                    for c in 0..cin {
                        out[c] += prow[c * k + j];
                    }
                }
            }
        });
        dx
    }

    /// Returns the output `[batch*len, out]` and the patch matrix for backward.
    pub(crate) fn forward_positions(&self, x: &Matrix, batch: usize, len: usize) -> Result<(Matrix, Matrix)> {
        if x.cols != self.in_channels || x.rows != batch * len {
            return Err(shape_err(
                "conv1d input",
                format!("({}, {}) positions x channels", batch * len, self.in_channels),
                format!("({}, {})", x.rows, x.cols),
            ));
        }
        let cols = self.im2col(x, batch, len);
        let mut y = Matrix::zeros(batch * len, self.out_channels);
        for row in y.data.chunks_exact_mut(self.out_channels) {
            row.copy_from_slice(&self.bias);
        }
        matmul(
            View::new(&cols.data, cols.rows, cols.cols),
            View::new(&self.weight, self.out_channels, self.patch_width()).t(),
            &mut y.data,
            1.0,
        );
        Ok((y, cols))
    }

    /// Gradients `(d_input, d_weight, d_bias)` given the upstream gradient.
    pub(crate) fn backward_positions(&self, cols: &Matrix, dy: &Matrix, batch: usize, len: usize, need_input_grad: bool) -> (Option<Matrix>, Vec<f64>, Vec<f64>) {
        let pw = self.patch_width();
        let mut dw = vec![0.0; self.out_channels * pw];
        matmul(
            View::new(&dy.data, dy.rows, dy.cols).t(),
            View::new(&cols.data, cols.rows, cols.cols),
            &mut dw,
            0.0,
        );
        let db = dy.column_sums();
        let dx = need_input_grad.then(|| {
            let mut dcols = Matrix::zeros(dy.rows, pw);
            matmul(
                View::new(&dy.data, dy.rows, dy.cols),
                View::new(&self.weight, self.out_channels, pw),
                &mut dcols.data,
                0.0,
            );
            self.col2im(&dcols, batch, len)
        });
        (dx, dw, db)
    }
}

/// SAME-padded, stride-1 cross-correlation of `x` (`(batch, in, len)`).
pub fn conv1d_forward(x: &Tensor3, conv: &Conv1d) -> Result<Tensor3> {
    conv.validate()?;
    if x.channels() != conv.in_channels {
        return Err(shape_err(
            "conv1d_forward",
            format!("(*, {}, *)", conv.in_channels),
            format!("{:?}", x.shape()),
        ));
    }
    if x.length() == 0 {
        return Err(shape_err("conv1d_forward", "length >= 1", "0"));
    }
    let (y, _) = conv.forward_positions(&x.to_positions(), x.batch(), x.length())?;
    Ok(Tensor3::from_positions(&y, x.batch(), x.length()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnConfig {
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Per-channel affine normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one training batch's statistics into the running estimates
    /// (unbiased variance).
    pub fn update_running(&mut self, stats: &BnBatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbias = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - momentum) * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = (1.0 - momentum) * self.running_var[c] + momentum * stats.var[c] * unbias;
        }
    }
}

/// Biased batch statistics of one training-mode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub(crate) struct BnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

/// Normalizes each column of `x`. In training mode the batch statistics are
/// returned (not applied to the running estimates).
pub(crate) fn batchnorm_positions(x: &Matrix, bn: &BatchNorm, cfg: BnConfig, mode: Mode) -> Result<(Matrix, BnCache, Option<BnBatchStats>)> {
    let ch = x.cols;
    if ch != bn.channels() {
        return Err(shape_err("batchnorm", format!("{} channels", bn.channels()), format!("{ch}")));
    }
    let n = x.rows;
    let (mean, var, stats) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(NnError::BatchTooSmall(n));
            }
            let mean: Vec<f64> = x.column_sums().into_iter().map(|s| s / n as f64).collect();
            let mut var = vec![0.0; ch];
            for row in x.data.chunks_exact(ch) {
                for c in 0..ch {
                    let d = row[c] - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let stats = BnBatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count: n,
            };
            (mean, var, Some(stats))
        }
        Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone(), None),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + cfg.eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(n, ch);
    let mut y = Matrix::zeros(n, ch);
    for ((xr, hr), yr) in x
        .data
        .chunks_exact(ch)
        .zip(xhat.data.chunks_exact_mut(ch))
        .zip(y.data.chunks_exact_mut(ch))
    {
        for c in 0..ch {
            let h = (xr[c] - mean[c]) * inv_std[c];
            hr[c] = h;
            yr[c] = bn.gamma[c] * h + bn.beta[c];
        }
    }
    Ok((y, BnCache { xhat, inv_std }, stats))
}

/// Training-mode backward: returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_backward(dy: &Matrix, cache: &BnCache, bn: &BatchNorm) -> (Matrix, Vec<f64>, Vec<f64>) {
    let ch = dy.cols;
    let n = dy.rows as f64;
    let mut dgamma = vec![0.0; ch];
    let mut dbeta = vec![0.0; ch];
    for (dr, hr) in dy.data.chunks_exact(ch).zip(cache.xhat.data.chunks_exact(ch)) {
        for c in 0..ch {
            dbeta[c] += dr[c];
            dgamma[c] += dr[c] * hr[c];
        }
    }
    // dx = gamma * inv_std / n * (n dy - sum(dy) - xhat * sum(dy xhat))
    let mut dx = Matrix::zeros(dy.rows, ch);
    for ((dr, hr), xr) in dy
        .data
        .chunks_exact(ch)
        .zip(cache.xhat.data.chunks_exact(ch))
        .zip(dx.data.chunks_exact_mut(ch))
    {
        for c in 0..ch {
            xr[c] = bn.gamma[c] * cache.inv_std[c] / n * (n * dr[c] - dbeta[c] - hr[c] * dgamma[c]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization over `(batch, length)` per channel. In training mode
/// the running statistics of `bn` are updated.
pub fn batchnorm_forward(x: &Tensor3, bn: &mut BatchNorm, cfg: BnConfig, mode: Mode) -> Result<Tensor3> {
    let (y, _, stats) = batchnorm_positions(&x.to_positions(), bn, cfg, mode)?;
    if let Some(s) = stats {
        bn.update_running(&s, cfg.momentum);
    }
    Ok(Tensor3::from_positions(&y, x.batch(), x.length()))
}

pub(crate) fn relu_in_place(x: &mut Matrix) {
    x.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Mean over the length axis: `(batch, channels, len)` → `batch × channels`.
pub fn global_avg_pool(x: &Tensor3) -> Result<Matrix> {
    if x.length() == 0 {
        return Err(shape_err("global_avg_pool", "length >= 1", "0"));
    }
    Ok(pool_positions(&x.to_positions(), x.batch(), x.length()))
}

pub(crate) fn pool_positions(x: &Matrix, batch: usize, len: usize) -> Matrix {
    let ch = x.cols;
    let mut out = Matrix::zeros(batch, ch);
    for b in 0..batch {
        let o = out.row_mut(b);
        for t in 0..len {
            for (acc, v) in o.iter_mut().zip(x.row(b * len + t)) {
                *acc += v;
            }
        }
        o.iter_mut().for_each(|v| *v /= len as f64);
    }
    out
}

pub(crate) fn pool_backward(dpooled: &Matrix, len: usize) -> Matrix {
    let ch = dpooled.cols;
    let mut dx = Matrix::zeros(dpooled.rows * len, ch);
    for b in 0..dpooled.rows {
        for t in 0..len {
            for (d, g) in dx.row_mut(b * len + t).iter_mut().zip(dpooled.row(b)) {
                *d = g / len as f64;
            }
        }
    }
    dx
}

/// Fully connected classifier head, weights `[classes, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.weight.len() != self.in_features * self.out_features || self.bias.len() != self.out_features {
            return Err(shape_err(
                "Dense",
                format!("{}x{} weights", self.out_features, self.in_features),
                format!("{} weights, {} biases", self.weight.len(), self.bias.len()),
            ));
        }
        Ok(())
    }

    pub(crate) fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows, self.out_features);
        for row in y.data.chunks_exact_mut(self.out_features) {
            row.copy_from_slice(&self.bias);
        }
        matmul(
            View::new(&x.data, x.rows, x.cols),
            View::new(&self.weight, self.out_features, self.in_features).t(),
            &mut y.data,
            1.0,
        );
        y
    }

    /// Returns `(dx, dweight, dbias)`.
    pub(crate) fn backward(&self, x: &Matrix, dy: &Matrix) -> (Matrix, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        matmul(View::new(&dy.data, dy.rows, dy.cols).t(), View::new(&x.data, x.rows, x.cols), &mut dw, 0.0);
        let mut dx = Matrix::zeros(x.rows, x.cols);
        matmul(
            View::new(&dy.data, dy.rows, dy.cols),
            View::new(&self.weight, self.out_features, self.in_features),
            &mut dx.data,
            0.0,
        );
        (dx, dw, dy.column_sums())
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for row in p.data.chunks_exact_mut(logits.cols.max(1)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}
