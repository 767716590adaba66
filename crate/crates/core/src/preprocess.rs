//! Grid resampling, outlier and range cleaning, and gap imputation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::artifacts::Dataset;
use crate::domain::{GlucoseSeries, Reading, BASE_RATE_MINUTES, GLUCOSE_MAX_MGDL, GLUCOSE_MIN_MGDL};
use crate::error::{Error, Result};
use crate::stineman;

pub const LINEAR_MAX_MINUTES: i64 = 25;
pub const STINEMAN_MIN_MINUTES: i64 = 30;
pub const STINEMAN_MAX_MINUTES: i64 = 115;
pub const LEFT_OPEN_MIN_MINUTES: i64 = 120;

pub fn check_rate(rate: u32) -> Result<()> {
    match rate {
        5 | 15 => Ok(()),
        other => Err(Error::Config(format!("sampling rate must be 5 or 15 minutes, got {other}"))),
    }
}

/// Nearest multiple of `step`; exact halves go to the even multiple.
fn snap(minute: i64, step: i64) -> i64 {
    let q = minute.div_euclid(step);
    let r = minute.rem_euclid(step);
    let up = match (2 * r).cmp(&step) {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => q % 2 != 0,
    };
    (q + up as i64) * step
}

/// Snaps every reading to the 5-minute grid and, for `rate == 15`, keeps
/// only points on absolute 15-minute multiples. Readings landing on the same
/// grid point collapse to the mean of their observed values. `t0` becomes
/// the first kept grid time.
pub fn resample_to_grid(series: &GlucoseSeries, rate: u32) -> Result<GlucoseSeries> {
    check_rate(rate)?;
    let base = BASE_RATE_MINUTES as i64;
    let mut buckets: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for r in &series.readings {
        let t = snap(series.t0 + r.offset, base);
        if t.rem_euclid(rate as i64) != 0 {
            continue;
        }
        let b = buckets.entry(t).or_default();
        if let Some(g) = r.glucose {
            b.push(g);
        }
    }
    let t0 = buckets.keys().next().copied().unwrap_or(series.t0);
    let readings = buckets
        .into_iter()
        .map(|(t, mut vals)| {
            let g = if vals.is_empty() {
                None
            } else {
                vals.sort_by(f64::total_cmp);
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            };
            Reading::new(t - t0, g)
        })
        .collect();
    Ok(GlucoseSeries::new(series.subject_id.clone(), t0, rate, readings))
}

/// Quantile by linear interpolation between order statistics of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `(lower, upper)` fences `Q1 - 1.5 IQR`, `Q3 + 1.5 IQR`; `None` with
/// fewer than four values.
pub fn iqr_fences(values: &[f64]) -> Option<(f64, f64)> {
    if values.len() < 4 {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&v, 0.25);
    let q3 = quantile_sorted(&v, 0.75);
    let iqr = q3 - q1;
    Some((q1 - 1.5 * iqr, q3 + 1.5 * iqr))
}

/// Marks values outside the subject's IQR fences as missing.
pub fn remove_outliers_iqr(series: &GlucoseSeries) -> GlucoseSeries {
    let values: Vec<f64> = series.observed_values().collect();
    let Some((lo, hi)) = iqr_fences(&values) else {
        log::warn!("{}: fewer than 4 values, outlier removal skipped", series.subject_id);
        return series.clone();
    };
    map_values(series, |g| (lo..=hi).contains(&g))
}

/// Marks values outside [40, 500] mg/dL as missing.
pub fn clamp_physiologic(series: &GlucoseSeries) -> GlucoseSeries {
    map_values(series, |g| (GLUCOSE_MIN_MGDL..=GLUCOSE_MAX_MGDL).contains(&g))
}

fn map_values(series: &GlucoseSeries, keep: impl Fn(f64) -> bool) -> GlucoseSeries {
    let mut out = series.clone();
    for r in &mut out.readings {
        r.glucose = r.glucose.filter(|&g| keep(g));
    }
    out
}

/// Outlier removal followed by the physiologic range check.
pub fn clean_series(series: &GlucoseSeries) -> GlucoseSeries {
    clamp_physiologic(&remove_outliers_iqr(series))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GapTreatment {
    Linear,
    Stineman,
    LeftOpen,
}

impl GapTreatment {
    /// Treatment of an interior gap covering `length` minutes of missing
    /// grid points.
    pub fn for_length(length: i64) -> GapTreatment {
        if length <= LINEAR_MAX_MINUTES {
            GapTreatment::Linear
        } else if length < LEFT_OPEN_MIN_MINUTES {
            GapTreatment::Stineman
        } else {
            GapTreatment::LeftOpen
        }
    }
}

impl fmt::Display for GapTreatment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GapTreatment::Linear => "LINEAR",
            GapTreatment::Stineman => "STINEMAN",
            GapTreatment::LeftOpen => "LEFT_OPEN",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Gap {
    pub start_offset: i64,
    pub length_minutes: i64,
    pub treatment: GapTreatment,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapReport {
    pub gaps: Vec<Gap>,
}

impl GapReport {
    pub fn total_minutes(&self) -> i64 {
        self.gaps.iter().map(|g| g.length_minutes).sum()
    }

    pub fn count(&self, t: GapTreatment) -> usize {
        self.gaps.iter().filter(|g| g.treatment == t).count()
    }
}

/// Finds maximal runs of missing or absent grid points. Runs before the
/// first or after the last observation are always left open.
pub fn classify_gaps(series: &GlucoseSeries) -> GapReport {
    let rate = series.rate as i64;
    let (Some(first), Some(last)) = (series.readings.first(), series.readings.last()) else {
        return GapReport::default();
    };
    let observed: Vec<i64> = series.readings.iter().filter(|r| r.glucose.is_some()).map(|r| r.offset).collect();
    let mut gaps = Vec::new();
    let open = |start, length| Gap {
        start_offset: start,
        length_minutes: length,
        treatment: GapTreatment::LeftOpen,
    };
    let (Some(&fo), Some(&lo)) = (observed.first(), observed.last()) else {
        gaps.push(open(first.offset, last.offset - first.offset + rate));
        return GapReport { gaps };
    };
    if fo > first.offset {
        gaps.push(open(first.offset, fo - first.offset));
    }
    for w in observed.windows(2) {
        let length = w[1] - w[0] - rate;
        if length > 0 {
            gaps.push(Gap {
                start_offset: w[0] + rate,
                length_minutes: length,
                treatment: GapTreatment::for_length(length),
            });
        }
    }
    if last.offset > lo {
        gaps.push(open(lo + rate, last.offset - lo));
    }
    GapReport { gaps }
}

fn require_dense(series: &GlucoseSeries) -> Result<()> {
    if series.is_dense() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{}: series is not on a dense grid", series.subject_id)))
    }
}

fn index_of(series: &GlucoseSeries, offset: i64) -> Option<usize> {
    let first = series.readings.first()?.offset;
    let rate = series.rate as i64;
    if offset < first || (offset - first) % rate != 0 {
        return None;
    }
    let i = ((offset - first) / rate) as usize;
    (i < series.len()).then_some(i)
}

fn anchors(series: &GlucoseSeries, gap: &Gap) -> Result<(usize, usize)> {
    let rate = series.rate as i64;
    let left = index_of(series, gap.start_offset - rate);
    let right = index_of(series, gap.start_offset + gap.length_minutes);
    match (left, right) {
        (Some(l), Some(r)) if series.readings[l].glucose.is_some() && series.readings[r].glucose.is_some() => Ok((l, r)),
        _ => Err(Error::Internal(format!(
            "{}: gap at offset {} lacks observed anchors",
            series.subject_id, gap.start_offset
        ))),
    }
}

fn linear_fill(series: &GlucoseSeries, gap: &Gap) -> Result<Vec<(usize, f64)>> {
    let (l, r) = anchors(series, gap)?;
    let (x0, y0) = (series.readings[l].offset as f64, series.readings[l].glucose.unwrap_or_default());
    let (x1, y1) = (series.readings[r].offset as f64, series.readings[r].glucose.unwrap_or_default());
    Ok((l + 1..r)
        .map(|i| {
            let t = (series.readings[i].offset as f64 - x0) / (x1 - x0);
            (i, y0 + t * (y1 - y0))
        })
        .collect())
}

/// Nearest observed neighbor of `from` stepping by `dir`, unless the run
/// of missing points in between is long enough to be left open.
fn neighbor_knot(series: &GlucoseSeries, from: usize, dir: isize) -> Option<usize> {
    let rate = series.rate as i64;
    let mut i = from as isize + dir;
    while i >= 0 && (i as usize) < series.len() {
        let r = &series.readings[i as usize];
        if r.glucose.is_some() {
            let missing = (r.offset - series.readings[from].offset).abs() - rate;
            return (missing < LEFT_OPEN_MIN_MINUTES).then_some(i as usize);
        }
        i += dir;
    }
    None
}

fn stineman_fill(series: &GlucoseSeries, gap: &Gap) -> Result<Vec<(usize, f64)>> {
    let (l, r) = anchors(series, gap)?;
    let mut knots = Vec::with_capacity(4);
    knots.extend(neighbor_knot(series, l, -1));
    knots.push(l);
    knots.push(r);
    knots.extend(neighbor_knot(series, r, 1));
    let x: Vec<f64> = knots.iter().map(|&k| series.readings[k].offset as f64).collect();
    let y: Vec<f64> = knots.iter().map(|&k| series.readings[k].glucose.unwrap_or_default()).collect();
    let yp = stineman::slopes(&x, &y);
    let seg = knots.iter().position(|&k| k == l).unwrap_or(0);
    Ok((l + 1..r)
        .map(|i| {
            let v = stineman::eval_in(&x, &y, &yp, seg, series.readings[i].offset as f64);
            (i, v.clamp(GLUCOSE_MIN_MGDL, GLUCOSE_MAX_MGDL))
        })
        .collect())
}

fn apply(series: &GlucoseSeries, fills: Vec<(usize, f64)>) -> GlucoseSeries {
    let mut out = series.clone();
    for (i, v) in fills {
        out.readings[i].glucose = Some(v);
    }
    out
}

/// Fills a gap on the straight line between its anchors.
pub fn interpolate_linear(series: &GlucoseSeries, gap: &Gap) -> Result<GlucoseSeries> {
    require_dense(series)?;
    Ok(apply(series, linear_fill(series, gap)?))
}

/// Fills a gap with the Stineman interpolant through the anchors and their
/// nearest observed neighbors, clamped to [40, 500].
pub fn interpolate_stineman(series: &GlucoseSeries, gap: &Gap) -> Result<GlucoseSeries> {
    require_dense(series)?;
    Ok(apply(series, stineman_fill(series, gap)?))
}

/// Densifies the grid, classifies gaps and fills the LINEAR and STINEMAN
/// ones. All knots are observed values of the input, never earlier fills.
pub fn impute_series(series: &GlucoseSeries) -> Result<(GlucoseSeries, GapReport)> {
    if !series.is_gridded() {
        return Err(Error::Invalid(format!("{}: series is not gridded", series.subject_id)));
    }
    let dense = series.densify();
    let report = classify_gaps(&dense);
    let mut fills = Vec::new();
    for gap in &report.gaps {
        match gap.treatment {
            GapTreatment::Linear => fills.extend(linear_fill(&dense, gap)?),
            GapTreatment::Stineman => fills.extend(stineman_fill(&dense, gap)?),
            GapTreatment::LeftOpen => {}
        }
    }
    Ok((apply(&dense, fills), report))
}

/// Resample, clean and impute one raw series.
pub fn preprocess_series(series: &GlucoseSeries, rate: u32) -> Result<(GlucoseSeries, GapReport)> {
    let gridded = resample_to_grid(series, rate)?;
    impute_series(&clean_series(&gridded))
}

/// One row of `gaps.csv`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapRow {
    pub subject_id: String,
    pub start_offset: i64,
    pub length_minutes: i64,
    pub treatment: GapTreatment,
}

/// Preprocesses every series of a dataset (in parallel, order preserved).
pub fn preprocess_dataset(ds: &Dataset, rate: u32) -> Result<(Dataset, Vec<GapRow>)> {
    use rayon::prelude::*;
    let results: Vec<(GlucoseSeries, GapReport)> =
        ds.series.par_iter().map(|s| preprocess_series(s, rate)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut series = Vec::with_capacity(results.len());
    for (s, report) in results {
        rows.extend(report.gaps.iter().map(|g| GapRow {
            subject_id: s.subject_id.clone(),
            start_offset: g.start_offset,
            length_minutes: g.length_minutes,
            treatment: g.treatment,
        }));
        series.push(s);
    }
    Ok((Dataset::new("cleaned", rate, ds.subjects.clone(), series), rows))
}

pub fn gaps_csv(rows: &[GapRow]) -> String {
    let mut s = String::from("subject_id,start_offset,length_minutes,treatment\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.subject_id, r.start_offset, r.length_minutes, r.treatment));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(offsets: &[i64], values: &[f64]) -> GlucoseSeries {
        let readings = offsets.iter().zip(values).map(|(&o, &v)| Reading::new(o, Some(v))).collect();
        GlucoseSeries::new("s", 0, 5, readings)
    }

    fn grid(values: &[Option<f64>]) -> GlucoseSeries {
        GlucoseSeries::from_grid("s", 0, 5, values)
    }

    #[test]
    fn snapping() {
        let s = resample_to_grid(&raw(&[0, 4, 11], &[1.0, 2.0, 3.0]), 5).unwrap();
        assert_eq!(s.readings.iter().map(|r| r.offset).collect::<Vec<_>>(), vec![0, 5, 10]);
        assert_eq!(snap(-3, 5), -5);
        assert_eq!(snap(10, 20), 0);
        assert_eq!(snap(30, 20), 40);
    }

    #[test]
    fn decimation_to_fifteen_minutes() {
        let s = raw(&[0, 5, 10, 15, 20, 25, 30], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let r = resample_to_grid(&s, 15).unwrap();
        assert_eq!(r.readings, vec![Reading::new(0, Some(1.0)), Reading::new(15, Some(4.0)), Reading::new(30, Some(7.0))]);
        assert_eq!(r.rate, 15);
    }

    #[test]
    fn fifteen_minute_grid_is_absolute() {
        let mut s = raw(&[0, 5, 10, 15], &[1.0, 2.0, 3.0, 4.0]);
        s.t0 = 5;
        let r = resample_to_grid(&s, 15).unwrap();
        assert_eq!(r.t0, 15);
        assert_eq!(r.readings, vec![Reading::new(0, Some(3.0))]);
    }

    #[test]
    fn collisions_average() {
        let r = resample_to_grid(&raw(&[0, 1, 2], &[100.0, 110.0, 120.0]), 5).unwrap();
        assert_eq!(r.readings, vec![Reading::new(0, Some(110.0))]);
    }

    #[test]
    fn gridded_series_is_unchanged() {
        let s = grid(&[Some(100.0), None, Some(120.0)]);
        assert_eq!(resample_to_grid(&s, 5).unwrap(), s);
        assert!(matches!(resample_to_grid(&s, 10), Err(Error::Config(_))));
    }

    #[test]
    fn iqr_example() {
        let vals = [100.0, 102.0, 98.0, 101.0, 99.0, 480.0];
        let (lo, hi) = iqr_fences(&vals).unwrap();
        assert!((lo - 95.5).abs() < 1e-12 && (hi - 105.5).abs() < 1e-12);
        let s = remove_outliers_iqr(&grid(&vals.map(Some)));
        assert_eq!(s.readings[5].glucose, None);
        assert_eq!(s.observed_count(), 5);
    }

    #[test]
    fn iqr_degenerate_cases() {
        let c = grid(&[Some(120.0); 6]);
        assert_eq!(remove_outliers_iqr(&c), c);
        let short = grid(&[Some(1.0), Some(1000.0), Some(2.0)]);
        assert_eq!(remove_outliers_iqr(&short), short);
    }

    #[test]
    fn range_boundaries() {
        let s = clamp_physiologic(&grid(&[Some(39.9), Some(40.0), Some(500.0), Some(501.0)]));
        assert_eq!(s.values(), vec![None, Some(40.0), Some(500.0), None]);
    }

    #[test]
    fn gap_classification() {
        let mut v = vec![Some(100.0)];
        v.push(None);
        v.push(Some(100.0));
        v.extend([None; 6]);
        v.push(Some(100.0));
        v.extend([None; 24]);
        v.push(Some(100.0));
        let r = classify_gaps(&grid(&v));
        let got: Vec<_> = r.gaps.iter().map(|g| (g.start_offset, g.length_minutes, g.treatment)).collect();
        assert_eq!(
            got,
            vec![(5, 5, GapTreatment::Linear), (15, 30, GapTreatment::Stineman), (50, 120, GapTreatment::LeftOpen)]
        );
    }

    #[test]
    fn treatment_boundaries() {
        assert_eq!(GapTreatment::for_length(25), GapTreatment::Linear);
        assert_eq!(GapTreatment::for_length(30), GapTreatment::Stineman);
        assert_eq!(GapTreatment::for_length(115), GapTreatment::Stineman);
        assert_eq!(GapTreatment::for_length(120), GapTreatment::LeftOpen);
    }

    #[test]
    fn edge_runs_are_left_open() {
        let r = classify_gaps(&grid(&[None, Some(100.0), None]));
        assert_eq!(r.gaps.len(), 2);
        assert!(r.gaps.iter().all(|g| g.treatment == GapTreatment::LeftOpen && g.length_minutes == 5));
        let none = classify_gaps(&grid(&[None, None]));
        assert_eq!(none.gaps[0].length_minutes, 10);
    }

    #[test]
    fn absent_grid_points_count_as_gaps() {
        let s = GlucoseSeries::new("s", 0, 5, vec![Reading::new(0, Some(1.0)), Reading::new(20, Some(2.0))]);
        let r = classify_gaps(&s);
        assert_eq!(r.gaps, vec![Gap { start_offset: 5, length_minutes: 15, treatment: GapTreatment::Linear }]);
    }

    #[test]
    fn linear_examples() {
        let s = grid(&[Some(100.0), None, None, Some(130.0)]);
        let gap = classify_gaps(&s).gaps[0];
        assert_eq!(interpolate_linear(&s, &gap).unwrap().values(), vec![Some(100.0), Some(110.0), Some(120.0), Some(130.0)]);
        let s = grid(&[Some(70.0), None, Some(60.0)]);
        let gap = classify_gaps(&s).gaps[0];
        assert_eq!(interpolate_linear(&s, &gap).unwrap().readings[1].glucose, Some(65.0));
    }

    #[test]
    fn missing_anchor_is_internal_error() {
        let s = grid(&[None, None, Some(60.0)]);
        let gap = Gap { start_offset: 5, length_minutes: 5, treatment: GapTreatment::Linear };
        assert!(matches!(interpolate_linear(&s, &gap), Err(Error::Internal(_))));
    }

    #[test]
    fn stineman_is_clamped() {
        // Steep fall into the lower bound pushes the rational fill below 40.
        let mut v = vec![Some(300.0), Some(42.0)];
        v.extend([None; 8]);
        v.extend([Some(41.0), Some(400.0)]);
        let s = grid(&v);
        let gap = classify_gaps(&s).gaps[0];
        assert_eq!(gap.treatment, GapTreatment::Stineman);
        let f = interpolate_stineman(&s, &gap).unwrap();
        assert!(f.observed_values().all(|g| (40.0..=500.0).contains(&g)));
    }

    #[test]
    fn impute_mixed_gaps() {
        let mut v = vec![Some(100.0), Some(104.0)];
        v.push(None);
        v.push(Some(110.0));
        v.extend([Some(112.0), Some(115.0)]);
        v.extend([None; 11]);
        v.extend([Some(160.0), Some(162.0)]);
        let (out, report) = impute_series(&grid(&v)).unwrap();
        assert_eq!(report.count(GapTreatment::Linear), 1);
        assert_eq!(report.count(GapTreatment::Stineman), 1);
        assert_eq!(report.gaps[1].length_minutes, 55);
        assert_eq!(out.observed_count(), out.len());
    }

    #[test]
    fn long_gap_left_untouched() {
        let mut v = vec![Some(100.0)];
        v.extend([None; 25]);
        v.push(Some(100.0));
        let s = grid(&v);
        let (out, report) = impute_series(&s).unwrap();
        assert_eq!(out, s);
        assert_eq!(report.gaps[0].length_minutes, 125);
    }

    #[test]
    fn observed_series_is_identity() {
        let s = grid(&[Some(100.0), Some(90.0), Some(95.0)]);
        let (out, report) = impute_series(&s).unwrap();
        assert_eq!(out, s);
        assert!(report.gaps.is_empty());
    }
}
