//! Normalization, sliding windows, test-subject selection and the per-subject
//! fine-tune split.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{AgeGroup, GlucoseSeries, PointLabel, Subject, WindowSample, GLUCOSE_MAX_MGDL, GLUCOSE_MIN_MGDL};
use crate::artifacts::{read_json, write_file, write_json, Dataset};
use crate::error::{Error, Result};
use crate::labeling::LabelScheme;
use crate::preprocess::check_rate;

pub const SUPPORTED_ISL: [u32; 5] = [30, 45, 60, 90, 120];
pub const DEFAULT_TEST_PER_GROUP: usize = 10;
pub const MIN_FINETUNE_WINDOWS: usize = 10;

/// Fixed-range min-max scaler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Scaler {
    fn default() -> Self {
        Self {
            lo: GLUCOSE_MIN_MGDL,
            hi: GLUCOSE_MAX_MGDL,
        }
    }
}

impl Scaler {
    pub fn normalize(&self, value: f64) -> Result<f64> {
        if !(self.lo..=self.hi).contains(&value) {
            return Err(Error::Internal(format!(
                "glucose {value} outside [{}, {}] reached the scaler",
                self.lo, self.hi
            )));
        }
        Ok((value - self.lo) / (self.hi - self.lo))
    }

    pub fn denormalize(&self, unit: f64) -> f64 {
        self.lo + unit * (self.hi - self.lo)
    }
}

pub fn normalize(value: f64) -> Result<f64> {
    Scaler::default().normalize(value)
}

/// Window length in grid points for an input span of `isl` minutes.
pub fn window_length(isl_minutes: u32, rate: u32) -> Result<usize> {
    check_rate(rate)?;
    if !SUPPORTED_ISL.contains(&isl_minutes) || !isl_minutes.is_multiple_of(rate) {
        return Err(Error::Config(format!(
            "input span {isl_minutes} min is not one of {SUPPORTED_ISL:?} on a {rate}-minute grid"
        )));
    }
    Ok((isl_minutes / rate) as usize + 1)
}

/// Sliding windows with stride one grid step, labeled by their last point.
/// Windows with a missing value, an offset jump or an unlabeled last point
/// are skipped.
pub fn make_windows(
    series: &GlucoseSeries,
    labels: &[PointLabel],
    age_group: AgeGroup,
    isl_minutes: u32,
    scaler: &Scaler,
) -> Result<Vec<WindowSample>> {
    let len = window_length(isl_minutes, series.rate)?;
    if labels.len() != series.len() {
        return Err(Error::Internal(format!("{}: labels not aligned with readings", series.subject_id)));
    }
    let rate = series.rate as i64;
    let r = &series.readings;
    let mut out = Vec::new();
    // Length of the run of consecutive observed points ending at i.
    let mut run = 0usize;
    for i in 0..r.len() {
        run = match r[i].glucose {
            None => 0,
            Some(_) if i > 0 && run > 0 && r[i].offset - r[i - 1].offset == rate => run + 1,
            Some(_) => 1,
        };
        if run < len || labels[i] == PointLabel::Unlabeled {
            continue;
        }
        let features = r[i + 1 - len..=i]
            .iter()
            .map(|p| scaler.normalize(p.glucose.unwrap_or(f64::NAN)))
            .collect::<Result<Vec<f64>>>()?;
        out.push(WindowSample {
            subject_id: series.subject_id.clone(),
            end_time: series.t0 + r[i].offset,
            features,
            label: labels[i],
            age_group,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneBoundaries {
    /// Windows `[0, train_end)` train the personal model.
    pub train_end: usize,
    /// Windows `[train_end, gap_end)` are discarded as a temporal gap.
    pub gap_end: usize,
    /// Windows `[test_start, n)` are the personal test set.
    pub test_start: usize,
    pub n: usize,
}

/// 60:40 split with the last 10% of the training part dropped; floor
/// rounding throughout. `None` below ten windows.
pub fn finetune_boundaries(n: usize) -> Option<FinetuneBoundaries> {
    if n < MIN_FINETUNE_WINDOWS {
        return None;
    }
    let candidate = n * 6 / 10;
    let train_end = candidate * 9 / 10;
    Some(FinetuneBoundaries {
        train_end,
        gap_end: candidate,
        test_start: candidate,
        n,
    })
}

/// Count-based boundaries over time-ordered windows, with the discarded gap
/// widened until the first test window starts after the last training
/// window ends. A window covers `isl_minutes` up to its end time. `None`
/// when fewer than ten windows or no test window survives.
pub fn split_boundaries(windows: &[WindowSample], isl_minutes: u32) -> Option<FinetuneBoundaries> {
    let mut b = finetune_boundaries(windows.len())?;
    let last_train = windows[b.train_end - 1].end_time;
    while b.test_start < b.n && windows[b.test_start].end_time - isl_minutes as i64 <= last_train {
        b.test_start += 1;
    }
    b.gap_end = b.test_start;
    (b.test_start < b.n).then_some(b)
}

/// Splits one subject's time-ordered windows into personal train and test.
pub fn finetune_split(windows: &[WindowSample], isl_minutes: u32) -> Option<(Vec<WindowSample>, Vec<WindowSample>)> {
    debug_assert!(windows.windows(2).all(|w| w[0].end_time < w[1].end_time));
    let Some(b) = split_boundaries(windows, isl_minutes) else {
        if let Some(w) = windows.first() {
            log::warn!("{}: {} windows, excluded from fine-tuning", w.subject_id, windows.len());
        }
        return None;
    };
    Some((windows[..b.train_end].to_vec(), windows[b.test_start..].to_vec()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_per_group: usize,
    /// Training subjects per group; age-unknown subjects sit under
    /// `unknown` and only join the global pool.
    pub train_subjects: BTreeMap<AgeGroup, Vec<String>>,
    pub test_subjects: BTreeMap<AgeGroup, Vec<String>>,
    #[serde(default)]
    pub boundaries: BTreeMap<String, FinetuneBoundaries>,
}

impl SplitPlan {
    pub fn all_train(&self) -> BTreeSet<&str> {
        self.train_subjects.values().flatten().map(String::as_str).collect()
    }

    pub fn all_test(&self) -> BTreeSet<&str> {
        self.test_subjects.values().flatten().map(String::as_str).collect()
    }

    pub fn group_of_test(&self, id: &str) -> Option<AgeGroup> {
        self.test_subjects.iter().find(|(_, v)| v.iter().any(|s| s == id)).map(|(g, _)| *g)
    }

    /// Records the personal split of each test subject. `windows_of`
    /// returns a subject's time-ordered target windows.
    pub fn set_boundaries<'a>(&mut self, windows_of: impl Fn(&str) -> &'a [WindowSample], isl_minutes: u32) {
        self.boundaries = self
            .all_test()
            .into_iter()
            .filter_map(|id| split_boundaries(windows_of(id), isl_minutes).map(|b| (id.to_string(), b)))
            .collect();
    }
}

/// Per known age group, the `per_group` subjects with the most datapoints
/// go to test (ties by ascending id); everyone else trains.
pub fn select_test_subjects(subjects: &[(Subject, usize)], per_group: usize) -> SplitPlan {
    let mut by_group: BTreeMap<AgeGroup, Vec<(&str, usize)>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for (s, n) in subjects {
        if seen.insert(s.subject_id.as_str()) {
            by_group.entry(s.age_group).or_default().push((s.subject_id.as_str(), *n));
        }
    }
    let mut plan = SplitPlan {
        test_per_group: per_group,
        train_subjects: BTreeMap::new(),
        test_subjects: BTreeMap::new(),
        boundaries: BTreeMap::new(),
    };
    for (group, mut members) in by_group {
        members.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let take = if group.is_known() { per_group.min(members.len()) } else { 0 };
        if group.is_known() && members.len() < per_group {
            log::warn!("age group {group} has only {} subjects; all go to test", members.len());
        }
        let mut test: Vec<String> = members[..take].iter().map(|m| m.0.to_string()).collect();
        let mut train: Vec<String> = members[take..].iter().map(|m| m.0.to_string()).collect();
        test.sort();
        train.sort();
        if !test.is_empty() {
            plan.test_subjects.insert(group, test);
        }
        if !train.is_empty() {
            plan.train_subjects.insert(group, train);
        }
    }
    plan
}

/// Windows of every labeled series, ordered by subject id then end time.
pub fn dataset_windows(ds: &Dataset, isl_minutes: u32, scaler: &Scaler) -> Result<Vec<WindowSample>> {
    use rayon::prelude::*;
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::Invalid("dataset has no labels; run the label stage first".into()))?;
    let parts: Vec<Vec<WindowSample>> = ds
        .series
        .par_iter()
        .zip(labels.par_iter())
        .map(|(s, l)| make_windows(s, l, ds.age_group(&s.subject_id), isl_minutes, scaler))
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().flatten().collect())
}

pub const WINDOWS_CSV: &str = "windows.csv";
pub const WINDOWS_META: &str = "windows.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowsMeta {
    pub pipeline_version: String,
    pub isl_minutes: u32,
    pub rate: u32,
    pub length: usize,
    pub label_scheme: LabelScheme,
    pub scaler: Scaler,
    pub count: usize,
    pub subject_groups: BTreeMap<String, AgeGroup>,
}

/// Writes `windows.csv` (`subject_id,end_time,label,f0..`) and its JSON
/// sidecar.
pub fn save_windows(dir: &Path, windows: &[WindowSample], meta: &WindowsMeta) -> Result<()> {
    let mut out = String::from("subject_id,end_time,label");
    for i in 0..meta.length {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for w in windows {
        out.push_str(&format!("{},{},{}", w.subject_id, w.end_time, w.label.token()));
        for f in &w.features {
            out.push(',');
            out.push_str(&f.to_string());
        }
        out.push('\n');
    }
    write_file(&dir.join(WINDOWS_CSV), out.as_bytes())?;
    write_json(&dir.join(WINDOWS_META), meta)
}

pub fn load_windows(dir: &Path) -> Result<(Vec<WindowSample>, WindowsMeta)> {
    let meta: WindowsMeta = read_json(&dir.join(WINDOWS_META))?;
    let path = dir.join(WINDOWS_CSV);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::with_capacity(meta.count);
    for (n, line) in text.lines().enumerate().skip(1) {
        let bad = || Error::data(&path, format!("line {}: malformed window row", n + 1));
        let mut parts = line.split(',');
        let subject_id = parts.next().ok_or_else(bad)?.to_string();
        let end_time = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let label = PointLabel::parse(parts.next().ok_or_else(bad)?).map_err(|_| bad())?;
        let features = parts.map(|v| v.parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<f64>>>()?;
        if features.len() != meta.length {
            return Err(bad());
        }
        let age_group = meta.subject_groups.get(&subject_id).copied().unwrap_or(AgeGroup::Unknown);
        out.push(WindowSample {
            subject_id,
            end_time,
            features,
            label,
            age_group,
        });
    }
    Ok((out, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Sex;

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize(40.0).unwrap(), 0.0);
        assert_eq!(normalize(500.0).unwrap(), 1.0);
        assert_eq!(normalize(270.0).unwrap(), 0.5);
        assert!(matches!(normalize(39.0), Err(Error::Internal(_))));
    }

    #[test]
    fn window_lengths() {
        let got: Vec<usize> = SUPPORTED_ISL.iter().map(|&i| window_length(i, 5).unwrap()).collect();
        assert_eq!(got, vec![7, 10, 13, 19, 25]);
        assert_eq!(window_length(30, 15).unwrap(), 3);
        assert!(window_length(45, 15).is_ok());
        assert!(window_length(35, 5).is_err());
    }

    #[test]
    fn ten_points_make_four_windows() {
        let s = GlucoseSeries::from_grid("a", 100, 5, &[Some(100.0); 10]);
        let labels = vec![PointLabel::NoRisk; 10];
        let w = make_windows(&s, &labels, AgeGroup::G21To44, 30, &Scaler::default()).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[0].end_time, 130);
        assert_eq!(w[0].features.len(), 7);
    }

    #[test]
    fn missing_and_unlabeled_drop_windows() {
        let mut v = vec![Some(100.0); 10];
        v[3] = None;
        let s = GlucoseSeries::from_grid("a", 0, 5, &v);
        let mut labels = vec![PointLabel::Class(2); 10];
        labels[3] = PointLabel::Unlabeled;
        assert_eq!(make_windows(&s, &labels, AgeGroup::G0To13, 30, &Scaler::default()).unwrap().len(), 0);
        let s = GlucoseSeries::from_grid("a", 0, 5, &[Some(100.0); 10]);
        labels[9] = PointLabel::Unlabeled;
        labels[3] = PointLabel::Class(1);
        assert_eq!(make_windows(&s, &labels, AgeGroup::G0To13, 30, &Scaler::default()).unwrap().len(), 3);
    }

    #[test]
    fn offset_jumps_drop_windows() {
        let mut s = GlucoseSeries::from_grid("a", 0, 5, &[Some(100.0); 10]);
        for r in &mut s.readings[5..] {
            r.offset += 5;
        }
        let labels = vec![PointLabel::NoRisk; 10];
        assert!(make_windows(&s, &labels, AgeGroup::G0To13, 30, &Scaler::default()).unwrap().is_empty());
    }

    #[test]
    fn unclean_value_is_internal_error() {
        let s = GlucoseSeries::from_grid("a", 0, 5, &[Some(600.0); 7]);
        let labels = vec![PointLabel::NoRisk; 7];
        assert!(matches!(make_windows(&s, &labels, AgeGroup::G0To13, 30, &Scaler::default()), Err(Error::Internal(_))));
    }

    #[test]
    fn finetune_arithmetic() {
        let b = finetune_boundaries(100).unwrap();
        assert_eq!((b.train_end, b.gap_end, b.test_start), (54, 60, 60));
        let b = finetune_boundaries(10).unwrap();
        assert_eq!((b.train_end, b.test_start), (5, 6));
        assert!(finetune_boundaries(9).is_none());
    }

    fn timed(id: &str, times: &[i64]) -> Vec<WindowSample> {
        times
            .iter()
            .map(|&t| WindowSample {
                subject_id: id.into(),
                end_time: t,
                features: vec![0.5; 7],
                label: PointLabel::Class(1),
                age_group: AgeGroup::G0To13,
            })
            .collect()
    }

    #[test]
    fn gap_widens_until_no_overlap() {
        // Contiguous windows: the 2-window gap of n = 20 leaves overlap, so
        // the test part starts at the first window ending after 45 + 30.
        let w = timed("a", &(0..20).map(|i| i * 5).collect::<Vec<_>>());
        let b = split_boundaries(&w, 30).unwrap();
        assert_eq!((b.train_end, b.test_start), (10, 16));
        assert!(w[b.test_start].end_time - 30 > w[b.train_end - 1].end_time);
        // Spread-out windows keep the count-based boundaries.
        let w = timed("a", &(0..20).map(|i| i * 100).collect::<Vec<_>>());
        assert_eq!(split_boundaries(&w, 30), finetune_boundaries(20));
        // Nothing left for testing.
        let w = timed("a", &(0..10).map(|i| i * 5).collect::<Vec<_>>());
        assert!(split_boundaries(&w, 30).is_none());
    }

    #[test]
    fn top_subjects_by_count_with_id_ties() {
        let mut subs: Vec<(Subject, usize)> =
            (0..12).map(|i| (Subject::new(format!("s{i:02}"), Some(30), Sex::F), 1000 - i)).collect();
        subs[10].1 = subs[9].1; // s09 and s10 tie at rank 10
        let plan = select_test_subjects(&subs, 10);
        let test = &plan.test_subjects[&AgeGroup::G21To44];
        assert_eq!(test.len(), 10);
        assert!(test.contains(&"s09".to_string()) && !test.contains(&"s10".to_string()));
        assert_eq!(plan.train_subjects[&AgeGroup::G21To44], vec!["s10", "s11"]);
    }

    #[test]
    fn unknown_age_only_trains() {
        let subs = vec![(Subject::new("u", None, Sex::F), 500), (Subject::new("k", Some(5), Sex::M), 1)];
        let plan = select_test_subjects(&subs, 10);
        assert_eq!(plan.all_test().into_iter().collect::<Vec<_>>(), vec!["k"]);
        assert_eq!(plan.train_subjects[&AgeGroup::Unknown], vec!["u"]);
    }
}
