//! On-disk pipeline artifacts: a directory with `manifest.json` and one CSV
//! per subject under `series/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{AgeGroup, ClassSetName, GlucoseSeries, PointLabel, Reading, Sex, Subject};
use crate::error::{Error, Result};
use crate::labeling::LabelScheme;
use crate::PIPELINE_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SERIES_DIR: &str = "series";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub subject_id: String,
    pub age_years: Option<u32>,
    pub sex: Sex,
    pub age_group: AgeGroup,
    pub t0: Option<i64>,
    /// Non-missing values stored in the subject's file.
    pub datapoints: usize,
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub pipeline_version: String,
    pub created_utc: String,
    pub stage: String,
    pub sampling_rate_minutes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_set: Option<ClassSetName>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_scheme: Option<LabelScheme>,
    pub subjects: Vec<ManifestSubject>,
}

/// Subjects plus their series (and labels, after the labeling stage).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub stage: String,
    pub rate: u32,
    pub subjects: Vec<Subject>,
    pub series: Vec<GlucoseSeries>,
    /// Aligned with `series` when present.
    pub labels: Option<Vec<Vec<PointLabel>>>,
    pub label_scheme: Option<LabelScheme>,
}

impl Dataset {
    /// Pairs series with subject records; series without a record get an
    /// age-unknown subject. Sorted by subject id.
    pub fn new(stage: &str, rate: u32, subjects: Vec<Subject>, mut series: Vec<GlucoseSeries>) -> Self {
        series.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let mut subjects = subjects;
        for s in &series {
            if !subjects.iter().any(|x| x.subject_id == s.subject_id) {
                subjects.push(Subject::new(s.subject_id.clone(), None, Sex::Unknown));
            }
        }
        subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        Self {
            stage: stage.to_string(),
            rate,
            subjects,
            series,
            labels: None,
            label_scheme: None,
        }
    }

    pub fn subject(&self, id: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn age_group(&self, id: &str) -> AgeGroup {
        self.subject(id).map_or(AgeGroup::Unknown, |s| s.age_group)
    }
}

/// `created_utc` honors `SOURCE_DATE_EPOCH` so rebuilt artifacts can be
/// byte-identical.
pub fn created_utc() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse::<i64>().ok());
    let ts = match secs {
        Some(s) => chrono::DateTime::from_timestamp(s, 0).unwrap_or_default(),
        None => chrono::Utc::now(),
    };
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn sanitize(id: &str) -> String {
    let s: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(48)
        .collect();
    if s.is_empty() {
        "subject".into()
    } else {
        s
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(path, e.to_string()))
}

fn series_csv(series: &GlucoseSeries, labels: Option<&[PointLabel]>) -> Vec<u8> {
    let mut out = Vec::with_capacity(series.len() * 16);
    out.extend_from_slice(if labels.is_some() {
        b"offset_minutes,glucose_mgdl,label\n"
    } else {
        b"offset_minutes,glucose_mgdl\n"
    });
    for (i, r) in series.readings.iter().enumerate() {
        let g = r.glucose.map(|v| v.to_string()).unwrap_or_default();
        match labels {
            Some(l) => writeln!(out, "{},{},{}", r.offset, g, l[i].token()),
            None => writeln!(out, "{},{}", r.offset, g),
        }
        .expect("write to vec");
    }
    out
}

pub fn save_dataset(dir: &Path, ds: &Dataset, class_set: Option<ClassSetName>) -> Result<()> {
    fs::create_dir_all(dir.join(SERIES_DIR)).map_err(|e| Error::io(dir, e))?;
    if let Some(l) = &ds.labels {
        if l.len() != ds.series.len() || l.iter().zip(&ds.series).any(|(a, s)| a.len() != s.len()) {
            return Err(Error::Internal("labels are not aligned with series".into()));
        }
    }
    let mut entries = Vec::with_capacity(ds.subjects.len());
    let mut index = 0usize;
    for subject in &ds.subjects {
        let pos = ds.series.iter().position(|s| s.subject_id == subject.subject_id);
        let (t0, datapoints, file) = match pos {
            Some(p) => {
                let s = &ds.series[p];
                let name = format!("{SERIES_DIR}/{index:05}_{}.csv", sanitize(&s.subject_id));
                index += 1;
                let labels = ds.labels.as_ref().map(|l| l[p].as_slice());
                write_file(&dir.join(&name), &series_csv(s, labels))?;
                (Some(s.t0), s.observed_count(), Some(name))
            }
            None => (None, 0, None),
        };
        entries.push(ManifestSubject {
            subject_id: subject.subject_id.clone(),
            age_years: subject.age_years,
            sex: subject.sex,
            age_group: subject.age_group,
            t0,
            datapoints,
            file,
        });
    }
    let manifest = Manifest {
        pipeline_version: PIPELINE_VERSION.to_string(),
        created_utc: created_utc(),
        stage: ds.stage.clone(),
        sampling_rate_minutes: ds.rate,
        class_set,
        label_scheme: ds.label_scheme,
        subjects: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    if !dir.is_dir() {
        return Err(Error::data(dir, "artifact directory does not exist"));
    }
    read_json(&dir.join(MANIFEST_FILE))
}

fn read_series_csv(path: &Path, id: &str, t0: i64, rate: u32) -> Result<(GlucoseSeries, Option<Vec<PointLabel>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let labeled = match header {
        "offset_minutes,glucose_mgdl" => false,
        "offset_minutes,glucose_mgdl,label" => true,
        other => return Err(Error::data(path, format!("bad header '{other}'"))),
    };
    let mut readings = Vec::new();
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let bad = |m: &str| Error::data(path, format!("line {}: {m}", n + 2));
        let mut parts = line.split(',');
        let offset = parts.next().and_then(|v| v.parse::<i64>().ok()).ok_or_else(|| bad("bad offset"))?;
        let g = parts.next().ok_or_else(|| bad("missing glucose field"))?;
        let glucose = if g.is_empty() {
            None
        } else {
            Some(g.parse::<f64>().map_err(|_| bad("bad glucose"))?)
        };
        if labeled {
            let l = parts.next().ok_or_else(|| bad("missing label field"))?;
            labels.push(PointLabel::parse(l).map_err(|e| bad(&e.to_string()))?);
        }
        readings.push(Reading::new(offset, glucose));
    }
    Ok((GlucoseSeries::new(id, t0, rate, readings), labeled.then_some(labels)))
}

pub fn load_dataset(dir: &Path) -> Result<(Dataset, Manifest)> {
    let manifest = load_manifest(dir)?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    let mut series = Vec::new();
    let mut labels: Vec<Vec<PointLabel>> = Vec::new();
    let mut any_labels = false;
    for e in &manifest.subjects {
        subjects.push(Subject {
            subject_id: e.subject_id.clone(),
            age_years: e.age_years,
            sex: e.sex,
            age_group: e.age_group,
        });
        if let Some(file) = &e.file {
            let path: PathBuf = dir.join(file);
            let (s, l) = read_series_csv(&path, &e.subject_id, e.t0.unwrap_or(0), manifest.sampling_rate_minutes)?;
            any_labels |= l.is_some();
            labels.push(l.unwrap_or_default());
            series.push(s);
        }
    }
    let mut ds = Dataset::new(&manifest.stage, manifest.sampling_rate_minutes, subjects, series);
    if any_labels {
        ds.labels = Some(labels);
        ds.label_scheme = manifest.label_scheme;
    }
    Ok((ds, manifest))
}
