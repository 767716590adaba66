//! The three-block fully convolutional classifier.
//!
//! Each block is conv → batch norm → ReLU; the last block feeds a global
//! average pool, a dense layer and a softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, NnError, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_positions, pool_backward, pool_positions, relu_in_place, softmax, BatchNorm, BnBatchStats, BnCache,
    BnConfig, Conv1d, Dense, Mode,
};
use crate::loss::{focal_loss, FocalLossConfig};
use crate::tensor::{Matrix, Tensor3};

/// Channel widths and kernel widths of the convolutional blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![128, 256, 128],
            kernels: vec![8, 5, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv1d,
    pub bn: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub input_length: usize,
    pub classes: usize,
    pub seed: u64,
    pub epochs_trained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnModel {
    pub blocks: Vec<ConvBlock>,
    pub head: Dense,
    pub bn_config: BnConfig,
    pub meta: ModelMeta,
}

/// Gradients in [`FcnModel::parameters_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &FcnModel) -> Self {
        Self {
            tensors: model.parameter_sizes().into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }
}

/// Activations kept from a training-mode forward pass.
pub struct ForwardCache {
    batch: usize,
    len: usize,
    blocks: Vec<BlockCache>,
    pooled: Matrix,
    pub probs: Matrix,
    pub bn_stats: Vec<BnBatchStats>,
}

struct BlockCache {
    cols: Matrix,
    bn: BnCache,
    out: Matrix,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl FcnModel {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(arch: &Architecture, input_length: usize, classes: usize, seed: u64) -> Result<Self> {
        if arch.channels.len() != arch.kernels.len() || arch.channels.is_empty() {
            return Err(shape_err("Architecture", "equal, non-empty channel and kernel lists", format!("{arch:?}")));
        }
        if input_length == 0 || classes == 0 {
            return Err(shape_err("FcnModel::new", "input length and classes >= 1", format!("L={input_length}, C={classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut in_ch = 1;
        for (&out_ch, &k) in arch.channels.iter().zip(&arch.kernels) {
            let bound = 1.0 / ((in_ch * k) as f64).sqrt();
            let conv = Conv1d::new(in_ch, out_ch, k, uniform(&mut rng, out_ch * in_ch * k, bound), uniform(&mut rng, out_ch, bound))?;
            blocks.push(ConvBlock {
                conv,
                bn: BatchNorm::new(out_ch),
            });
            in_ch = out_ch;
        }
        let bound = 1.0 / (in_ch as f64).sqrt();
        let head = Dense {
            in_features: in_ch,
            out_features: classes,
            weight: uniform(&mut rng, classes * in_ch, bound),
            bias: uniform(&mut rng, classes, bound),
        };
        Ok(Self {
            blocks,
            head,
            bn_config: BnConfig::default(),
            meta: ModelMeta {
                input_length,
                classes,
                seed,
                epochs_trained: 0,
            },
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            channels: self.blocks.iter().map(|b| b.conv.out_channels).collect(),
            kernels: self.blocks.iter().map(|b| b.conv.kernel).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut in_ch = 1;
        for b in &self.blocks {
            b.conv.validate()?;
            if b.conv.in_channels != in_ch {
                return Err(shape_err("FcnModel block chain", format!("{in_ch} input channels"), format!("{}", b.conv.in_channels)));
            }
            let ch = b.conv.out_channels;
            if [&b.bn.gamma, &b.bn.beta, &b.bn.running_mean, &b.bn.running_var].iter().any(|v| v.len() != ch) {
                return Err(shape_err("BatchNorm", format!("{ch} channels"), "mismatched parameter lengths"));
            }
            if b.bn.running_var.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || b.bn.running_mean.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Corrupt("non-finite or negative running statistics".into()));
            }
            in_ch = ch;
        }
        self.head.validate()?;
        if self.head.in_features != in_ch || self.head.out_features != self.meta.classes {
            return Err(shape_err(
                "Dense head",
                format!("{in_ch} -> {}", self.meta.classes),
                format!("{} -> {}", self.head.in_features, self.head.out_features),
            ));
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor3) -> Result<()> {
        if x.channels() != 1 || x.length() != self.meta.input_length {
            return Err(shape_err(
                "model input",
                format!("(batch, 1, {})", self.meta.input_length),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Class probabilities, one row per sample.
    pub fn forward(&self, x: &Tensor3, mode: Mode) -> Result<Matrix> {
        Ok(self.forward_cached(x, mode)?.probs)
    }

    /// Forward pass that keeps the activations needed by [`FcnModel::backward`].
    /// Training-mode batch statistics are returned in the cache and are not
    /// folded into the running estimates; see [`FcnModel::apply_bn_stats`].
    pub fn forward_cached(&self, x: &Tensor3, mode: Mode) -> Result<ForwardCache> {
        self.check_input(x)?;
        let (batch, len) = (x.batch(), x.length());
        let mut act = x.to_positions();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut bn_stats = Vec::new();
        for b in &self.blocks {
            let (z, cols) = b.conv.forward_positions(&act, batch, len)?;
            let (mut y, bn_cache, stats) = batchnorm_positions(&z, &b.bn, self.bn_config, mode)?;
            relu_in_place(&mut y);
            bn_stats.extend(stats);
            blocks.push(BlockCache {
                cols,
                bn: bn_cache,
                out: y.clone(),
            });
            act = y;
        }
        let pooled = pool_positions(&act, batch, len);
        let probs = softmax(&self.head.forward(&pooled));
        Ok(ForwardCache {
            batch,
            len,
            blocks,
            pooled,
            probs,
            bn_stats,
        })
    }

    pub fn apply_bn_stats(&mut self, stats: &[BnBatchStats]) {
        let momentum = self.bn_config.momentum;
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.bn.update_running(s, momentum);
        }
    }

    /// Exact gradients of the mean focal loss for a training-mode cache.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize], loss: &FocalLossConfig) -> Result<(f64, Gradients)> {
        let out = focal_loss(&cache.probs, labels, loss)?;
        let (dpooled, dhw, dhb) = self.head.backward(&cache.pooled, &out.grad_logits);
        let mut per_block: Vec<[Vec<f64>; 4]> = Vec::with_capacity(self.blocks.len());
        let mut dact = pool_backward(&dpooled, cache.len);
        for (i, (b, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            for (d, o) in dact.data.iter_mut().zip(&bc.out.data) {
                if *o <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dz, dgamma, dbeta) = batchnorm_backward(&dact, &bc.bn, &b.bn);
            let (dx, dw, db) = b.conv.backward_positions(&bc.cols, &dz, cache.batch, cache.len, i > 0);
            per_block.push([dw, db, dgamma, dbeta]);
            if let Some(dx) = dx {
                dact = dx;
            }
        }
        per_block.reverse();
        let mut tensors: Vec<Vec<f64>> = per_block.into_iter().flatten().collect();
        tensors.push(dhw);
        tensors.push(dhb);
        Ok((out.loss, Gradients { tensors }))
    }

    /// Mean loss of a batch without touching running statistics.
    pub fn loss(&self, x: &Tensor3, labels: &[usize], loss: &FocalLossConfig, mode: Mode) -> Result<f64> {
        let c = self.forward_cached(x, mode)?;
        Ok(focal_loss(&c.probs, labels, loss)?.loss)
    }

    /// Trainable tensors: per block conv weight, conv bias, BN gamma, BN beta;
    /// then head weight and head bias.
    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            v.push(&mut b.conv.weight);
            v.push(&mut b.conv.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    pub fn parameter_sizes(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([b.conv.weight.len(), b.conv.bias.len(), b.bn.gamma.len(), b.bn.beta.len()]);
        }
        v.extend([self.head.weight.len(), self.head.bias.len()]);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_sizes().iter().sum()
    }

    /// Zeroes the head so every input maps to the uniform distribution.
    pub fn zero_head(&mut self) {
        self.head.weight.iter_mut().for_each(|w| *w = 0.0);
        self.head.bias.iter_mut().for_each(|w| *w = 0.0);
    }
}
