//! Class-weighted focal loss on softmax outputs.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Matrix;

/// Probability floor applied before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `-alpha_y (1 - p_y)^gamma ln p_y`, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    pub gamma: f64,
    pub alpha: Vec<f64>,
}

impl FocalLossConfig {
    /// Focal loss with every class weight equal to one.
    pub fn uniform(classes: usize, gamma: f64) -> Self {
        Self {
            gamma,
            alpha: vec![1.0; classes],
        }
    }

    /// `alpha_c = N / (C * N_c)` from training label counts. Classes with no
    /// training samples get weight 1.
    pub fn balanced(counts: &[usize], gamma: f64) -> Self {
        let total: usize = counts.iter().sum();
        let c = counts.len() as f64;
        let alpha = counts
            .iter()
            .map(|&n| if n == 0 { 1.0 } else { total as f64 / (c * n as f64) })
            .collect();
        Self { gamma, alpha }
    }

    pub fn classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(NnError::InvalidLossConfig(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.alpha.is_empty() {
            return Err(NnError::InvalidLossConfig("alpha vector is empty".into()));
        }
        if let Some((c, a)) = self.alpha.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
            return Err(NnError::InvalidLossConfig(format!("alpha[{c}] = {a} must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient of the mean loss with respect to the pre-softmax logits.
    pub grad_logits: Matrix,
    /// Number of samples whose true-class probability hit the floor.
    pub clamped: usize,
}

/// Loss value and its gradient with respect to the logits that produced
/// `probs` through a softmax.
pub fn focal_loss(probs: &Matrix, labels: &[usize], cfg: &FocalLossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let classes = probs.cols;
    if classes != cfg.classes() {
        return Err(NnError::ShapeMismatch {
            context: "focal_loss",
            expected: format!("{} classes", cfg.classes()),
            actual: format!("{classes}"),
        });
    }
    if labels.len() != probs.rows {
        return Err(NnError::ShapeMismatch {
            context: "focal_loss labels",
            expected: format!("{}", probs.rows),
            actual: format!("{}", labels.len()),
        });
    }
    let n = probs.rows as f64;
    let gamma = cfg.gamma;
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = Matrix::zeros(probs.rows, classes);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(NnError::LabelOutOfRange { label: y, classes });
        }
        let row = probs.row(i);
        let mut p = row[y];
        if p < PROB_FLOOR {
            p = PROB_FLOOR;
            clamped += 1;
        }
        let alpha = cfg.alpha[y];
        let q = (1.0 - p).max(0.0);
        let lnp = p.ln();
        loss += -alpha * q.powf(gamma) * lnp;
        // d/dz_j = alpha [ q^g - g p q^(g-1) ln p ] (p_j - [j == y])
        let coef = if q == 0.0 {
            0.0
        } else if gamma == 0.0 {
            alpha
        } else {
            alpha * (q.powf(gamma) - gamma * p * q.powf(gamma - 1.0) * lnp)
        };
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            let target = if j == y { 1.0 } else { 0.0 };
            *gj = coef * (row[j] - target) / n;
        }
    }
    if clamped > 0 {
        log::warn!("focal loss: {clamped} true-class probabilities clamped to {PROB_FLOOR}");
    }
    Ok(LossOutput {
        loss: loss / n,
        grad_logits: grad,
        clamped,
    })
}
