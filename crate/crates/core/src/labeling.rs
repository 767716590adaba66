//! Onset-class and binary risk labels for gridded series.
//!
//! For a point above the threshold, Δ is the number of minutes until the
//! next event point (glucose ≤ 70) of the same contiguous segment. A missing
//! value or an offset jump ends a segment, so lead times never span a hole.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::artifacts::Dataset;
use crate::domain::{ClassSetName, ClassSetSpec, GlucoseSeries, PointLabel, HYPO_THRESHOLD_MGDL, RISK_HORIZON_MINUTES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LabelScheme {
    Classes(ClassSetName),
    Binary,
}

impl LabelScheme {
    pub fn num_classes(self) -> usize {
        match self {
            LabelScheme::Classes(name) => crate::domain::class_set(name).num_classes(),
            LabelScheme::Binary => 2,
        }
    }

    /// Model target for a label under this scheme.
    pub fn target(self, label: PointLabel) -> Option<usize> {
        match self {
            LabelScheme::Classes(_) => label.class_index(),
            LabelScheme::Binary => label.binary_index(),
        }
    }
}

impl fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LabelScheme::Classes(n) => write!(f, "set {n}"),
            LabelScheme::Binary => f.write_str("binary"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSeries {
    pub series: GlucoseSeries,
    pub labels: Vec<PointLabel>,
    pub scheme: LabelScheme,
}

pub fn is_event(glucose: f64) -> bool {
    glucose <= HYPO_THRESHOLD_MGDL
}

/// Minutes to the next event point within the segment, per reading.
/// `Some(0)` marks an event; `None` marks missing values and points with no
/// later event in their segment.
pub fn lead_times(series: &GlucoseSeries) -> Vec<Option<u32>> {
    let rate = series.rate as i64;
    let n = series.len();
    let mut out = vec![None; n];
    let mut next_event: Option<i64> = None;
    for i in (0..n).rev() {
        let r = series.readings[i];
        if i + 1 < n && series.readings[i + 1].offset - r.offset != rate {
            next_event = None;
        }
        match r.glucose {
            None => next_event = None,
            Some(g) if is_event(g) => {
                next_event = Some(r.offset);
                out[i] = Some(0);
            }
            Some(_) => out[i] = next_event.map(|e| (e - r.offset) as u32),
        }
    }
    out
}

pub fn assign_classes(series: &GlucoseSeries, spec: &ClassSetSpec) -> LabeledSeries {
    let labels = series
        .readings
        .iter()
        .zip(lead_times(series))
        .map(|(r, delta)| match (r.glucose, delta) {
            (None, _) => PointLabel::Unlabeled,
            (Some(_), Some(d)) => spec.class_of(d).map_or(PointLabel::NoRisk, PointLabel::Class),
            (Some(_), None) => PointLabel::NoRisk,
        })
        .collect();
    LabeledSeries {
        series: series.clone(),
        labels,
        scheme: LabelScheme::Classes(spec.name),
    }
}

pub fn assign_binary_risk(series: &GlucoseSeries) -> LabeledSeries {
    let labels = series
        .readings
        .iter()
        .zip(lead_times(series))
        .map(|(r, delta)| match (r.glucose, delta) {
            (None, _) => PointLabel::Unlabeled,
            (Some(_), Some(d)) if d <= RISK_HORIZON_MINUTES => PointLabel::Risk,
            (Some(_), _) => PointLabel::NoRisk,
        })
        .collect();
    LabeledSeries {
        series: series.clone(),
        labels,
        scheme: LabelScheme::Binary,
    }
}

pub fn label_series(series: &GlucoseSeries, scheme: LabelScheme) -> LabeledSeries {
    match scheme {
        LabelScheme::Classes(name) => assign_classes(series, &crate::domain::class_set(name)),
        LabelScheme::Binary => assign_binary_risk(series),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: BTreeMap<PointLabel, u64>,
}

impl ClassDistribution {
    pub fn get(&self, label: PointLabel) -> u64 {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    /// Count of labeled (non-UNLABELED) points.
    pub fn labeled_total(&self) -> u64 {
        self.counts.iter().filter(|(l, _)| **l != PointLabel::Unlabeled).map(|(_, c)| c).sum()
    }

    /// Rows `(label token, count)` with every class of the scheme present,
    /// zero counts included.
    pub fn rows(&self, scheme: LabelScheme) -> Vec<(String, u64)> {
        let mut keys: Vec<PointLabel> = match scheme {
            LabelScheme::Classes(_) => (0..scheme.num_classes() as u8).map(PointLabel::Class).collect(),
            LabelScheme::Binary => vec![PointLabel::Risk],
        };
        keys.push(PointLabel::NoRisk);
        keys.push(PointLabel::Unlabeled);
        keys.into_iter()
            .map(|k| {
                let name = if k == PointLabel::Unlabeled { "UNLABELED".into() } else { k.token() };
                (name, self.get(k))
            })
            .collect()
    }
}

impl ClassDistribution {
    /// `label,count,fraction` with the fraction taken over labeled points.
    pub fn to_csv(&self, scheme: LabelScheme) -> String {
        let total = self.labeled_total().max(1) as f64;
        let mut s = String::from("label,count,fraction\n");
        for (name, count) in self.rows(scheme) {
            let frac = if name == "UNLABELED" { String::new() } else { (count as f64 / total).to_string() };
            s.push_str(&format!("{name},{count},{frac}\n"));
        }
        s
    }
}

pub fn class_distribution<'a>(labels: impl IntoIterator<Item = &'a [PointLabel]>) -> ClassDistribution {
    let mut d = ClassDistribution::default();
    for series in labels {
        for &l in series {
            *d.counts.entry(l).or_insert(0) += 1;
        }
    }
    d
}

/// Labels every series of a gridded dataset.
pub fn label_dataset(ds: &Dataset, scheme: LabelScheme) -> Result<Dataset> {
    if let Some(bad) = ds.series.iter().find(|s| !s.is_gridded()) {
        return Err(Error::Invalid(format!("{}: series is not gridded; run preprocessing first", bad.subject_id)));
    }
    let labels = ds.series.iter().map(|s| label_series(s, scheme).labels).collect();
    let mut out = ds.clone();
    out.stage = "labeled".into();
    out.labels = Some(labels);
    out.label_scheme = Some(scheme);
    Ok(out)
}
