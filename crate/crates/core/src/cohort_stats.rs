//! Per-age descriptive statistics and Tukey's HSD for candidate age splits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{GlucoseSeries, Subject};
use crate::error::{Error, Result};
use crate::ingestion::{group_lookup, mean_std};

/// Degrees of freedom of the embedded table rows; the last row is df = ∞.
pub const Q_TABLE_DF: [f64; 5] = [10.0, 20.0, 30.0, 60.0, 120.0];

/// Upper 5% points of the studentized range, k = 2..=10 per row.
const Q_TABLE: [[f64; 9]; 6] = [
    [3.15106, 3.87678, 4.32658, 4.65429, 4.91202, 5.12417, 5.30424, 5.46050, 5.59839],
    [2.95000, 3.57793, 3.95829, 4.23186, 4.44524, 4.61991, 4.76758, 4.89537, 5.00788],
    [2.88821, 3.48642, 3.84540, 4.10208, 4.30146, 4.46418, 4.60141, 4.71994, 4.82414],
    [2.82885, 3.39866, 3.73709, 3.97742, 4.16316, 4.31414, 4.44108, 4.55041, 4.64632],
    [2.80004, 3.35614, 3.68459, 3.91694, 4.09599, 4.24118, 4.36301, 4.46777, 4.55954],
    [2.77181, 3.31449, 3.63316, 3.85766, 4.03009, 4.16955, 4.28631, 4.38651, 4.47412],
];

pub const SUPPORTED_ALPHA: f64 = 0.05;

/// Tabulated cell for `k` groups at table row `row` (5 = infinite df).
pub fn q_table_entry(k: usize, row: usize) -> f64 {
    Q_TABLE[row][k - 2]
}

/// Studentized-range quantile q(k, df) at α = 0.05. Between finite table
/// rows the value is interpolated linearly in ln(df); above df = 120 it is
/// interpolated linearly in 1/df towards the df = ∞ row.
pub fn studentized_range_q(k: usize, df: f64, alpha: f64) -> Result<f64> {
    if alpha != SUPPORTED_ALPHA {
        return Err(Error::Config(format!("only alpha = 0.05 is supported, got {alpha}")));
    }
    if !(2..=10).contains(&k) {
        return Err(Error::Config(format!("studentized range table covers 2 to 10 groups, got {k}")));
    }
    if df.is_nan() || df < Q_TABLE_DF[0] {
        return Err(Error::Config(format!("studentized range table needs df >= 10, got {df}")));
    }
    let c = k - 2;
    let last = Q_TABLE_DF.len() - 1;
    if df >= Q_TABLE_DF[last] {
        let t = Q_TABLE_DF[last] / df;
        return Ok(Q_TABLE[last + 1][c] + t * (Q_TABLE[last][c] - Q_TABLE[last + 1][c]));
    }
    let i = Q_TABLE_DF.partition_point(|&d| d <= df) - 1;
    let (d0, d1) = (Q_TABLE_DF[i], Q_TABLE_DF[i + 1]);
    let t = (df.ln() - d0.ln()) / (d1.ln() - d0.ln());
    Ok(Q_TABLE[i][c] + t * (Q_TABLE[i + 1][c] - Q_TABLE[i][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyPair {
    pub group_a: String,
    pub group_b: String,
    /// mean(b) − mean(a)
    pub mean_diff: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub reject_null: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeyResult {
    pub pairs: Vec<TukeyPair>,
    pub mse: f64,
    pub df: f64,
    pub q: f64,
}

/// Tukey's honestly significant difference over all unordered pairs.
pub fn tukey_hsd(groups: &[(String, Vec<f64>)], alpha: f64) -> Result<TukeyResult> {
    if groups.len() < 2 {
        return Err(Error::Invalid("Tukey HSD needs at least two groups".into()));
    }
    let mut means = Vec::with_capacity(groups.len());
    let mut ss = 0.0;
    let mut total = 0usize;
    for (name, values) in groups {
        if values.len() < 2 {
            return Err(Error::Invalid(format!("group '{name}' has fewer than two values")));
        }
        let (m, _) = mean_std(values);
        ss += values.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        total += values.len();
        means.push(m);
    }
    let k = groups.len();
    let df = (total - k) as f64;
    let q = studentized_range_q(k, df, alpha)?;
    let mse = ss / df;
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let (na, nb) = (groups[a].1.len() as f64, groups[b].1.len() as f64);
            let half = q / std::f64::consts::SQRT_2 * (mse * (1.0 / na + 1.0 / nb)).sqrt();
            let diff = means[b] - means[a];
            let (lo, hi) = (diff - half, diff + half);
            pairs.push(TukeyPair {
                group_a: groups[a].0.clone(),
                group_b: groups[b].0.clone(),
                mean_diff: diff,
                ci_lower: lo,
                ci_upper: hi,
                reject_null: !(lo <= 0.0 && 0.0 <= hi),
            });
        }
    }
    Ok(TukeyResult { pairs, mse, df, q })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeRow {
    pub age_years: u32,
    pub subjects: usize,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub std: f64,
}

/// Statistics pooled over all readings of all subjects of each integer age.
pub fn summary_per_age(series: &[GlucoseSeries], subjects: &[Subject]) -> Vec<AgeRow> {
    let lookup = group_lookup(subjects);
    let mut sorted: Vec<&GlucoseSeries> = series.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut by_age: BTreeMap<u32, (usize, Vec<f64>)> = BTreeMap::new();
    for s in sorted {
        let Some(age) = lookup.get(s.subject_id.as_str()).and_then(|x| x.age_years) else {
            continue;
        };
        let e = by_age.entry(age).or_default();
        e.0 += 1;
        e.1.extend(s.observed_values());
    }
    by_age
        .into_iter()
        .filter(|(_, (_, v))| !v.is_empty())
        .map(|(age, (n, v))| {
            let (mean, std) = mean_std(&v);
            AgeRow {
                age_years: age,
                subjects: n,
                count: v.len(),
                mean,
                min: v.iter().copied().fold(f64::INFINITY, f64::min),
                max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                std,
            }
        })
        .collect()
}

/// Labels of the age bins induced by strictly increasing edges, e.g.
/// `[14, 21, 45]` → `0-13, 14-20, 21-44, 45+`.
pub fn bin_labels(edges: &[u32]) -> Result<Vec<String>> {
    if edges.windows(2).any(|w| w[0] >= w[1]) || edges.first() == Some(&0) {
        return Err(Error::Config(format!("bin edges must be strictly increasing and positive: {edges:?}")));
    }
    let mut labels = Vec::with_capacity(edges.len() + 1);
    let mut lo = 0;
    for &e in edges {
        labels.push(format!("{lo}-{}", e - 1));
        lo = e;
    }
    labels.push(format!("{lo}+"));
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub edges: Vec<u32>,
    pub groups: Vec<String>,
    pub group_sizes: Vec<usize>,
    /// False when some bin captured no subject; no test is run then.
    pub feasible: bool,
    pub all_pairs_significant: bool,
    pub pairs: Vec<TukeyPair>,
}

/// Groups subjects with known numeric age into the bins and runs Tukey's
/// HSD over their pooled readings.
pub fn evaluate_split(series: &[GlucoseSeries], subjects: &[Subject], edges: &[u32]) -> Result<SplitEvaluation> {
    let labels = bin_labels(edges)?;
    let lookup = group_lookup(subjects);
    let mut sorted: Vec<&GlucoseSeries> = series.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); labels.len()];
    let mut sizes = vec![0usize; labels.len()];
    for s in sorted {
        let Some(age) = lookup.get(s.subject_id.as_str()).and_then(|x| x.age_years) else {
            continue;
        };
        let bin = edges.partition_point(|&e| e <= age);
        sizes[bin] += 1;
        values[bin].extend(s.observed_values());
    }
    let mut eval = SplitEvaluation {
        edges: edges.to_vec(),
        groups: labels.clone(),
        group_sizes: sizes.clone(),
        feasible: true,
        all_pairs_significant: false,
        pairs: Vec::new(),
    };
    if sizes.contains(&0) {
        eval.feasible = false;
        return Ok(eval);
    }
    if labels.len() == 1 {
        log::warn!("a single age group has no pairs to compare");
        eval.all_pairs_significant = true;
        return Ok(eval);
    }
    let groups: Vec<(String, Vec<f64>)> = labels.into_iter().zip(values).collect();
    let result = tukey_hsd(&groups, SUPPORTED_ALPHA)?;
    eval.all_pairs_significant = result.pairs.iter().all(|p| p.reject_null);
    eval.pairs = result.pairs;
    Ok(eval)
}

/// One row per integer age, ready for plotting.
pub fn age_rows_csv(rows: &[AgeRow]) -> String {
    let mut s = String::from("age_years,subjects,count,mean,min,max,std\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.age_years, r.subjects, r.count, r.mean, r.min, r.max, r.std));
    }
    s
}

/// One row per group pair.
pub fn split_csv(eval: &SplitEvaluation) -> String {
    let mut s = String::from("group_a,group_b,mean_diff,ci_lower,ci_upper,reject_null\n");
    for p in &eval.pairs {
        s.push_str(&format!("{},{},{},{},{},{}\n", p.group_a, p.group_b, p.mean_diff, p.ci_lower, p.ci_upper, p.reject_null));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Sex;

    fn g(name: &str, v: &[f64]) -> (String, Vec<f64>) {
        (name.to_string(), v.to_vec())
    }

    #[test]
    fn table_rows_hit_exactly() {
        assert_eq!(studentized_range_q(3, 20.0, 0.05).unwrap(), 3.57793);
        assert_eq!(studentized_range_q(10, 120.0, 0.05).unwrap(), 4.55954);
        assert!((studentized_range_q(2, 1e12, 0.05).unwrap() - 2.77181).abs() < 1e-9);
    }

    #[test]
    fn interpolation_is_between_rows() {
        let q = studentized_range_q(4, 45.0, 0.05).unwrap();
        assert!(q < 3.84540 && q > 3.73709);
        let q = studentized_range_q(4, 240.0, 0.05).unwrap();
        assert!((q - (3.63316 + 0.5 * (3.68459 - 3.63316))).abs() < 1e-12);
    }

    #[test]
    fn unsupported_inputs() {
        assert!(matches!(studentized_range_q(3, 20.0, 0.01), Err(Error::Config(_))));
        assert!(studentized_range_q(11, 20.0, 0.05).is_err());
        assert!(studentized_range_q(3, 5.0, 0.05).is_err());
    }

    #[test]
    fn identical_groups_do_not_reject() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let r = tukey_hsd(&[g("a", &v), g("b", &v)], 0.05).unwrap();
        assert_eq!(r.pairs[0].mean_diff, 0.0);
        assert!(!r.pairs[0].reject_null);
    }

    #[test]
    fn small_group_is_named() {
        let err = tukey_hsd(&[g("a", &[1.0; 20]), g("tiny", &[1.0])], 0.05).unwrap_err();
        assert!(err.to_string().contains("tiny"));
    }

    #[test]
    fn swapping_groups_mirrors() {
        let a = g("a", &[1.0, 3.0, 2.0, 5.0, 4.0, 2.5]);
        let b = g("b", &[6.0, 7.5, 8.0, 6.5, 9.0, 7.0]);
        let ab = tukey_hsd(&[a.clone(), b.clone()], 0.05).unwrap().pairs[0].clone();
        let ba = tukey_hsd(&[b, a], 0.05).unwrap().pairs[0].clone();
        assert_eq!(ab.mean_diff, -ba.mean_diff);
        assert!((ab.ci_lower + ba.ci_upper).abs() < 1e-12);
        assert!(ab.reject_null && ba.reject_null);
    }

    #[test]
    fn per_age_pools_readings() {
        let s1 = GlucoseSeries::from_grid("a", 0, 5, &[Some(100.0), Some(200.0)]);
        let s2 = GlucoseSeries::from_grid("b", 0, 5, &[Some(300.0)]);
        let s3 = GlucoseSeries::from_grid("c", 0, 5, &[Some(1.0)]);
        let subs = [
            Subject::new("a", Some(30), Sex::F),
            Subject::new("b", Some(30), Sex::M),
            Subject::new("c", None, Sex::M),
        ];
        let rows = summary_per_age(&[s1, s2, s3], &subs);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].mean, rows[0].min, rows[0].max, rows[0].count), (200.0, 100.0, 300.0, 3));
    }

    #[test]
    fn bin_label_text() {
        assert_eq!(bin_labels(&[14, 21, 45]).unwrap(), vec!["0-13", "14-20", "21-44", "45+"]);
        assert!(bin_labels(&[21, 14]).is_err());
        assert_eq!(bin_labels(&[]).unwrap(), vec!["0+"]);
    }

    #[test]
    fn empty_bin_is_infeasible_and_single_group_vacuous() {
        let s = GlucoseSeries::from_grid("a", 0, 5, &[Some(100.0), Some(110.0)]);
        let subs = [Subject::new("a", Some(30), Sex::F)];
        let e = evaluate_split(std::slice::from_ref(&s), &subs, &[14]).unwrap();
        assert!(!e.feasible);
        let e = evaluate_split(&[s], &subs, &[]).unwrap();
        assert!(e.feasible && e.all_pairs_significant && e.pairs.is_empty());
    }
}
