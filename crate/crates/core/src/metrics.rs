//! Confusion matrices, per-class and macro recall/precision/F1, and
//! one-vs-rest average precision.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{write_file, write_json};
use crate::error::{Error, Result};
use glyconet_nn::Matrix;

pub const PR_AUC_DEFINITION: &str =
    "one-vs-rest step-wise average precision (ties grouped), macro mean over classes with support";

/// Rows are true labels, columns predictions.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != pred.len() {
        return Err(Error::Invalid(format!("{} labels but {} predictions", truth.len(), pred.len())));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= classes || p >= classes {
            return Err(Error::Invalid(format!("label pair ({t}, {p}) outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: u64,
    pub predicted: u64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// `None` when the class has no true samples.
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub pr_auc: f64,
    /// Classes with at least one true sample; only these are averaged.
    pub classes_averaged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: usize,
    pub samples: u64,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub pr_auc_definition: String,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro recall, precision and F1 from a confusion matrix.
/// Average precision is left unset.
pub fn macro_metrics(confusion: &[Vec<u64>]) -> (Vec<ClassMetrics>, MacroMetrics) {
    let c = confusion.len();
    let mut per = Vec::with_capacity(c);
    for k in 0..c {
        let tp = confusion[k][k];
        let support: u64 = confusion[k].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[k]).sum();
        let recall = ratio(tp, support);
        let precision = ratio(tp, predicted);
        let f1 = if recall + precision > 0.0 {
            2.0 * recall * precision / (recall + precision)
        } else {
            0.0
        };
        per.push(ClassMetrics {
            class: k,
            support,
            predicted,
            recall,
            precision,
            f1,
            average_precision: None,
        });
    }
    let supported: Vec<&ClassMetrics> = per.iter().filter(|m| m.support > 0).collect();
    let n = supported.len().max(1) as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| supported.iter().map(|m| f(m)).sum::<f64>() / n;
    let macro_avg = MacroMetrics {
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        f1: mean(|m| m.f1),
        pr_auc: 0.0,
        classes_averaged: supported.len(),
    };
    (per, macro_avg)
}

/// Step-wise average precision of `scores` against binary `positive`
/// labels: Σ (R_k − R_{k−1}) P_k over the distinct thresholds in descending
/// order. `None` without positives.
pub fn average_precision(positive: &[bool], scores: &[f64]) -> Option<f64> {
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    Some(ap)
}

/// One-vs-rest average precision per class and its macro mean over
/// classes with support.
pub fn pr_auc_macro(truth: &[usize], probs: &Matrix) -> (Vec<Option<f64>>, f64) {
    let per: Vec<Option<f64>> = (0..probs.cols)
        .map(|c| {
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            let scores: Vec<f64> = (0..probs.rows).map(|r| probs.get(r, c)).collect();
            average_precision(&pos, &scores)
        })
        .collect();
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    (per, mean)
}

/// Argmax with ties to the lowest class index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Full report for true labels and predicted class probabilities.
pub fn evaluate(truth: &[usize], probs: &Matrix) -> Result<MetricsReport> {
    if truth.len() != probs.rows {
        return Err(Error::Invalid(format!("{} labels but {} probability rows", truth.len(), probs.rows)));
    }
    let pred: Vec<usize> = (0..probs.rows).map(|r| argmax(probs.row(r))).collect();
    let confusion = confusion_matrix(truth, &pred, probs.cols)?;
    let (mut per_class, mut macro_avg) = macro_metrics(&confusion);
    let (ap, pr_auc) = pr_auc_macro(truth, probs);
    for (m, a) in per_class.iter_mut().zip(ap) {
        m.average_precision = a;
    }
    macro_avg.pr_auc = pr_auc;
    Ok(MetricsReport {
        classes: probs.cols,
        samples: truth.len() as u64,
        confusion,
        per_class,
        macro_avg,
        pr_auc_definition: PR_AUC_DEFINITION.to_string(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,support,recall,precision,f1,pr_auc\n");
        for m in &self.per_class {
            let _ = writeln!(s, "{},{},{},{},{},{}", m.class, m.support, m.recall, m.precision, m.f1, fmt_opt(m.average_precision));
        }
        let a = &self.macro_avg;
        let _ = writeln!(s, "macro,{},{},{},{},{}", self.samples, a.recall, a.precision, a.f1, a.pr_auc);
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for c in 0..self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (t, row) in self.confusion.iter().enumerate() {
            let _ = write!(s, "{t}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Writes `<stem>.json`, `<stem>.csv` and `<stem>_confusion.csv`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_json(&dir.join(format!("{stem}.json")), self)?;
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write_file(&dir.join(format!("{stem}_confusion.csv")), self.confusion_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_tally() {
        let t = [0, 0, 1, 1, 2, 2];
        let p = [0, 1, 1, 1, 0, 2];
        assert_eq!(confusion_matrix(&t, &p, 3).unwrap(), vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 1]]);
        assert!(confusion_matrix(&[3], &[0], 3).is_err());
    }

    #[test]
    fn degenerate_predictor_fills_one_column() {
        let m = confusion_matrix(&[0, 1, 2, 1], &[0, 0, 0, 0], 3).unwrap();
        assert!(m.iter().all(|r| r[1] == 0 && r[2] == 0));
    }

    #[test]
    fn binary_hand_case() {
        let (per, mac) = macro_metrics(&[vec![8, 2], vec![4, 6]]);
        assert_eq!((per[0].recall, per[1].recall), (0.8, 0.6));
        assert!((mac.recall - 0.7).abs() < 1e-15);
        assert!((per[0].precision - 8.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_absent_classes() {
        let (per, mac) = macro_metrics(&[vec![3, 0, 0], vec![0, 0, 0], vec![0, 0, 2]]);
        assert_eq!((mac.recall, mac.precision, mac.f1, mac.classes_averaged), (1.0, 1.0, 1.0, 2));
        assert_eq!(per[1].precision, 0.0);
    }

    #[test]
    fn average_precision_by_hand() {
        // Ranked: + - + - -  → P@1 = 1, P@3 = 2/3; AP = 0.5·1 + 0.5·2/3.
        let pos = [true, false, true, false, false];
        let scores = [0.9, 0.8, 0.7, 0.3, 0.1];
        let ap = average_precision(&pos, &scores).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
        // Tied scores form one threshold.
        let ap = average_precision(&[true, false], &[0.5, 0.5]).unwrap();
        assert!((ap - 0.5).abs() < 1e-15);
        assert_eq!(average_precision(&[false, false], &[0.1, 0.2]), None);
    }

    #[test]
    fn separable_scores_give_unit_ap() {
        let probs = Matrix::from_vec(4, 2, vec![0.9, 0.1, 0.8, 0.2, 0.3, 0.7, 0.4, 0.6]).unwrap();
        let r = evaluate(&[0, 0, 1, 1], &probs).unwrap();
        assert_eq!(r.macro_avg.pr_auc, 1.0);
        assert_eq!(r.macro_avg.recall, 1.0);
        assert!(r.to_csv().ends_with("macro,4,1,1,1,1\n"));
    }
}
