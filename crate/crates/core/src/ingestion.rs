//! CSV ingestion of raw CGM readings and subject demographics, and the
//! cohort summary derived from them.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::domain::{age_group_of_interval, AgeGroup, GlucoseSeries, Reading, Sex, Subject, BASE_RATE_MINUTES};
use crate::error::{Error, Result};

pub const GLUCOSE_HEADER: [&str; 3] = ["subject_id", "timestamp", "glucose_mgdl"];
pub const SUBJECTS_HEADER: [&str; 3] = ["subject_id", "age_years", "sex"];
/// Files with more malformed rows than this fraction are rejected.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub subject_id: String,
    /// Absolute minutes since the Unix epoch.
    pub minute: i64,
    pub glucose: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

/// Parses an ISO-8601 datetime (rounded to the nearest minute) or an integer
/// minute count.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(m) = s.parse::<i64>() {
        return Some(m);
    }
    const FORMATS: [&str; 4] = ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"];
    let s = s.trim_end_matches('Z');
    let dt = FORMATS.iter().find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?.and_hms_opt(0, 0, 0)?;
    let secs = (dt - epoch).num_seconds() - dt.second() as i64;
    let frac = dt.second() as f64 + dt.nanosecond() as f64 * 1e-9;
    Some(secs.div_euclid(60) + if frac >= 30.0 { 1 } else { 0 })
}

fn parse_glucose_row(rec: &csv::StringRecord) -> std::result::Result<RawRecord, String> {
    if rec.len() != 3 {
        return Err(format!("expected 3 fields, found {}", rec.len()));
    }
    let subject_id = rec[0].trim();
    if subject_id.is_empty() {
        return Err("empty subject_id".into());
    }
    let minute = parse_timestamp(&rec[1]).ok_or_else(|| format!("unparseable timestamp '{}'", &rec[1]))?;
    let glucose: f64 = rec[2].trim().parse().map_err(|_| format!("unparseable glucose '{}'", &rec[2]))?;
    if !glucose.is_finite() {
        return Err(format!("non-finite glucose '{}'", &rec[2]));
    }
    Ok(RawRecord {
        subject_id: subject_id.to_string(),
        minute,
        glucose,
    })
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, found: Option<csv::StringRecord>, expected: &[&str]) -> Result<()> {
    let ok = found
        .as_ref()
        .is_some_and(|h| h.len() == expected.len() && h.iter().zip(expected).all(|(a, b)| a.trim().trim_start_matches('\u{feff}') == *b));
    if ok {
        Ok(())
    } else {
        let got = found.map(|h| h.iter().collect::<Vec<_>>().join(",")).unwrap_or_default();
        Err(Error::data(path, format!("bad header '{got}', expected '{}'", expected.join(","))))
    }
}

/// Reads raw glucose records; returns the parsed rows and the row errors.
/// Fails when the header is wrong or more than 1% of rows are malformed.
pub fn read_glucose_records<R: Read>(reader: R, path: &Path) -> Result<(Vec<RawRecord>, Vec<RowError>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().transpose().map_err(|e| Error::data(path, e.to_string()))?;
    check_header(path, header, &GLUCOSE_HEADER)?;
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for rec in records {
        match rec {
            Ok(r) => {
                let line = r.position().map_or(0, |p| p.line());
                if r.len() == 1 && r[0].trim().is_empty() {
                    continue;
                }
                match parse_glucose_row(&r) {
                    Ok(row) => rows.push(row),
                    Err(message) => errors.push(RowError { line, message }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                errors.push(RowError { line, message: e.to_string() });
            }
        }
    }
    let total = rows.len() + errors.len();
    for e in &errors {
        log::warn!("{}:{}: {}", path.display(), e.line, e.message);
    }
    if total > 0 && errors.len() as f64 > MAX_MALFORMED_FRACTION * total as f64 {
        let first = &errors[0];
        return Err(Error::data(
            path,
            format!("{} of {total} rows malformed (first at line {}: {})", errors.len(), first.line, first.message),
        ));
    }
    Ok((rows, errors))
}

/// Groups raw records into one series per subject. Duplicate timestamps
/// collapse to the mean of their values, summed in sorted order so the
/// result does not depend on row order.
pub fn build_series(records: Vec<RawRecord>, rate: u32) -> Vec<GlucoseSeries> {
    let mut by_subject: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    for r in records {
        by_subject.entry(r.subject_id).or_default().entry(r.minute).or_default().push(r.glucose);
    }
    let base = BASE_RATE_MINUTES as i64;
    by_subject
        .into_iter()
        .map(|(id, points)| {
            let first = *points.keys().next().expect("non-empty group");
            let t0 = first.div_euclid(base) * base;
            let readings = points
                .into_iter()
                .map(|(minute, mut vals)| {
                    vals.sort_by(f64::total_cmp);
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    Reading::new(minute - t0, Some(mean))
                })
                .collect();
            GlucoseSeries::new(id, t0, rate, readings)
        })
        .collect()
}

/// Loads a glucose CSV into per-subject series sorted by subject id.
/// Offsets keep raw minute precision; grid snapping happens in
/// [`crate::preprocess::resample_to_grid`].
pub fn ingest_glucose(path: &Path, rate: u32) -> Result<Vec<GlucoseSeries>> {
    let (records, _) = read_glucose_records(open(path)?, path)?;
    Ok(build_series(records, rate))
}

/// Parses an age cell: an integer, or an interval such as `>=60`, `60+`,
/// `>60` or `18-25`. Returns `(age_years, group)`.
pub fn parse_age(cell: &str) -> Option<(Option<u32>, AgeGroup)> {
    let s = cell.trim();
    if s.is_empty() {
        return Some((None, AgeGroup::Unknown));
    }
    if let Ok(a) = s.parse::<u32>() {
        return Some((Some(a), crate::domain::age_group_of(a)));
    }
    if let Ok(a) = s.parse::<f64>() {
        if a.is_finite() && a >= 0.0 {
            let a = a.floor() as u32;
            return Some((Some(a), crate::domain::age_group_of(a)));
        }
        return None;
    }
    let interval = if let Some(rest) = s.strip_prefix(">=") {
        (rest.trim().parse::<u32>().ok()?, None)
    } else if let Some(rest) = s.strip_prefix('>') {
        (rest.trim().parse::<u32>().ok()? + 1, None)
    } else if let Some(rest) = s.strip_suffix('+') {
        (rest.trim().parse::<u32>().ok()?, None)
    } else if let Some(rest) = s.strip_prefix("<=") {
        (0, Some(rest.trim().parse::<u32>().ok()?))
    } else if let Some(rest) = s.strip_prefix('<') {
        (0, Some(rest.trim().parse::<u32>().ok()?.checked_sub(1)?))
    } else if let Some((a, b)) = s.split_once('-') {
        let (lo, hi) = (a.trim().parse::<u32>().ok()?, b.trim().parse::<u32>().ok()?);
        if hi < lo {
            return None;
        }
        (lo, Some(hi))
    } else {
        return None;
    };
    Some((None, age_group_of_interval(interval.0, interval.1)))
}

pub fn read_subjects<R: Read>(reader: R, path: &Path) -> Result<Vec<Subject>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();
    let header = records.next().transpose().map_err(|e| Error::data(path, e.to_string()))?;
    check_header(path, header, &SUBJECTS_HEADER)?;
    let mut out: BTreeMap<String, Subject> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::data(path, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(Error::data(path, format!("line {line}: expected 3 fields, found {}", rec.len())));
        }
        let id = rec[0].trim();
        if id.is_empty() {
            return Err(Error::data(path, format!("line {line}: empty subject_id")));
        }
        let (age_years, age_group) =
            parse_age(&rec[1]).ok_or_else(|| Error::data(path, format!("line {line}: unparseable age '{}'", &rec[1])))?;
        if age_group == AgeGroup::Unknown {
            log::warn!("{}:{line}: subject {id} has no usable age", path.display());
        }
        let subject = Subject {
            subject_id: id.to_string(),
            age_years,
            sex: Sex::parse(&rec[2]),
            age_group,
        };
        if let Some(prev) = out.get(id) {
            if prev.age_years != subject.age_years || prev.age_group != subject.age_group {
                return Err(Error::data(path, format!("line {line}: subject {id} listed with conflicting ages")));
            }
            continue;
        }
        out.insert(id.to_string(), subject);
    }
    Ok(out.into_values().collect())
}

/// Loads the demographics CSV, one subject per id, sorted by id.
pub fn ingest_subjects(path: &Path) -> Result<Vec<Subject>> {
    read_subjects(open(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub age_group: AgeGroup,
    pub subjects: usize,
    pub values: usize,
    pub mean_mgdl: f64,
    pub std_mgdl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject_id: String,
    pub age_group: AgeGroup,
    pub datapoints: usize,
    pub span_days: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub groups: Vec<GroupSummary>,
    pub subjects: Vec<SubjectSummary>,
    pub mean_days: f64,
    pub min_days: f64,
    pub max_days: f64,
    pub total_values: usize,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// Looks up each series' subject record; series without one are treated
/// as age unknown.
pub(crate) fn group_lookup(subjects: &[Subject]) -> BTreeMap<&str, &Subject> {
    subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect()
}

pub fn cohort_summary(series: &[GlucoseSeries], subjects: &[Subject]) -> CohortManifest {
    let lookup = group_lookup(subjects);
    let mut sorted: Vec<&GlucoseSeries> = series.iter().collect();
    sorted.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    let mut per_group: BTreeMap<AgeGroup, (usize, Vec<f64>)> = BTreeMap::new();
    let mut subject_rows = Vec::with_capacity(sorted.len());
    for s in sorted {
        let group = lookup.get(s.subject_id.as_str()).map_or(AgeGroup::Unknown, |x| x.age_group);
        let entry = per_group.entry(group).or_default();
        entry.0 += 1;
        entry.1.extend(s.observed_values());
        subject_rows.push(SubjectSummary {
            subject_id: s.subject_id.clone(),
            age_group: group,
            datapoints: s.observed_count(),
            span_days: s.span_days(),
        });
    }
    let groups = per_group
        .into_iter()
        .map(|(age_group, (subjects, values))| {
            let (mean_mgdl, std_mgdl) = mean_std(&values);
            GroupSummary {
                age_group,
                subjects,
                values: values.len(),
                mean_mgdl,
                std_mgdl,
            }
        })
        .collect::<Vec<_>>();
    let spans: Vec<f64> = subject_rows.iter().map(|s| s.span_days).collect();
    let (mean_days, min_days, max_days) = if spans.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        (
            spans.iter().sum::<f64>() / spans.len() as f64,
            spans.iter().copied().fold(f64::INFINITY, f64::min),
            spans.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    CohortManifest {
        total_values: groups.iter().map(|g| g.values).sum(),
        groups,
        subjects: subject_rows,
        mean_days,
        min_days,
        max_days,
    }
}
