//! Shared value types: glucose series, subjects, age groups, class sets and
//! window samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Glucose at or below this value (mg/dL) is a hypoglycemic event point.
pub const HYPO_THRESHOLD_MGDL: f64 = 70.0;
/// Physiologic range kept by cleaning, inclusive.
pub const GLUCOSE_MIN_MGDL: f64 = 40.0;
pub const GLUCOSE_MAX_MGDL: f64 = 500.0;
/// Lead times beyond this many minutes are "no risk".
pub const RISK_HORIZON_MINUTES: u32 = 120;
pub const EVENT_CLASS: u8 = 0;
/// Base sampling grid of the raw data.
pub const BASE_RATE_MINUTES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-13")]
    G0To13,
    #[serde(rename = "14-20")]
    G14To20,
    #[serde(rename = "21-44")]
    G21To44,
    #[serde(rename = "45+")]
    G45Plus,
    #[serde(rename = "unknown")]
    Unknown,
}

impl AgeGroup {
    pub const KNOWN: [AgeGroup; 4] = [AgeGroup::G0To13, AgeGroup::G14To20, AgeGroup::G21To44, AgeGroup::G45Plus];

    pub fn label(self) -> &'static str {
        match self {
            AgeGroup::G0To13 => "0-13",
            AgeGroup::G14To20 => "14-20",
            AgeGroup::G21To44 => "21-44",
            AgeGroup::G45Plus => "45+",
            AgeGroup::Unknown => "unknown",
        }
    }

    /// Inclusive age range; the senior bin is open-ended.
    pub fn age_range(self) -> Option<(u32, Option<u32>)> {
        match self {
            AgeGroup::G0To13 => Some((0, Some(13))),
            AgeGroup::G14To20 => Some((14, Some(20))),
            AgeGroup::G21To44 => Some((21, Some(44))),
            AgeGroup::G45Plus => Some((45, None)),
            AgeGroup::Unknown => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != AgeGroup::Unknown
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AgeGroup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "0-13" | "children" | "g0_13" => Ok(AgeGroup::G0To13),
            "14-20" | "teenagers" | "g14_20" => Ok(AgeGroup::G14To20),
            "21-44" | "adults" | "g21_44" => Ok(AgeGroup::G21To44),
            "45+" | "45-100" | "seniors" | "g45_plus" => Ok(AgeGroup::G45Plus),
            "unknown" => Ok(AgeGroup::Unknown),
            other => Err(Error::Config(format!("unknown age group '{other}'"))),
        }
    }
}

pub fn age_group_of(age_years: u32) -> AgeGroup {
    match age_years {
        0..=13 => AgeGroup::G0To13,
        14..=20 => AgeGroup::G14To20,
        21..=44 => AgeGroup::G21To44,
        _ => AgeGroup::G45Plus,
    }
}

/// Group of an age known only as an inclusive interval (`hi = None` is
/// open-ended). Intervals straddling a bin edge map to `Unknown`.
pub fn age_group_of_interval(lo: u32, hi: Option<u32>) -> AgeGroup {
    let g = age_group_of(lo);
    match (hi, g.age_range()) {
        (None, Some((_, None))) => g,
        (Some(h), Some((_, bin_hi))) if h >= lo && bin_hi.is_none_or(|b| h <= b) => g,
        _ => AgeGroup::Unknown,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
    Unknown,
}

impl Sex {
    pub fn parse(s: &str) -> Sex {
        match s.trim().to_ascii_lowercase().as_str() {
            "f" | "female" | "w" => Sex::F,
            "m" | "male" => Sex::M,
            _ => Sex::Unknown,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            Sex::F => "F",
            Sex::M => "M",
            Sex::Unknown => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subject {
    pub subject_id: String,
    pub age_years: Option<u32>,
    pub sex: Sex,
    pub age_group: AgeGroup,
}

impl Subject {
    pub fn new(subject_id: impl Into<String>, age_years: Option<u32>, sex: Sex) -> Self {
        Self {
            subject_id: subject_id.into(),
            age_years,
            sex,
            age_group: age_years.map_or(AgeGroup::Unknown, age_group_of),
        }
    }
}

/// One grid point; `glucose == None` marks a missing value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reading {
    pub offset: i64,
    pub glucose: Option<f64>,
}

impl Reading {
    pub fn new(offset: i64, glucose: Option<f64>) -> Self {
        Self { offset, glucose }
    }
}

/// One subject's CGM trace. Offsets are minutes after `t0` (absolute
/// minutes since the Unix epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSeries {
    pub subject_id: String,
    pub t0: i64,
    pub rate: u32,
    pub readings: Vec<Reading>,
}

impl GlucoseSeries {
    pub fn new(subject_id: impl Into<String>, t0: i64, rate: u32, readings: Vec<Reading>) -> Self {
        Self {
            subject_id: subject_id.into(),
            t0,
            rate,
            readings,
        }
    }

    /// Builds a series on a dense grid starting at offset 0.
    pub fn from_grid(subject_id: impl Into<String>, t0: i64, rate: u32, values: &[Option<f64>]) -> Self {
        let readings = values
            .iter()
            .enumerate()
            .map(|(i, &g)| Reading::new(i as i64 * rate as i64, g))
            .collect();
        Self::new(subject_id, t0, rate, readings)
    }

    pub fn len(&self) -> usize {
        self.readings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.readings.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.readings.iter().filter(|r| r.glucose.is_some()).count()
    }

    pub fn observed_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.readings.iter().filter_map(|r| r.glucose)
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        self.readings.iter().map(|r| r.glucose).collect()
    }

    /// Offsets strictly increasing and all multiples of the rate.
    pub fn is_gridded(&self) -> bool {
        let rate = self.rate as i64;
        rate > 0
            && self.readings.iter().all(|r| r.offset.rem_euclid(rate) == 0)
            && self.readings.windows(2).all(|w| w[0].offset < w[1].offset)
    }

    /// Whether every grid point between the first and last reading is present.
    pub fn is_dense(&self) -> bool {
        self.is_gridded() && self.readings.windows(2).all(|w| w[1].offset - w[0].offset == self.rate as i64)
    }

    /// Inserts a missing reading at every absent grid point between the
    /// first and last reading. Requires a gridded series.
    pub fn densify(&self) -> GlucoseSeries {
        let Some(first) = self.readings.first() else {
            return self.clone();
        };
        let rate = self.rate as i64;
        let mut out = Vec::with_capacity(self.readings.len());
        let mut next = first.offset;
        for r in &self.readings {
            while next < r.offset {
                out.push(Reading::new(next, None));
                next += rate;
            }
            out.push(*r);
            next = r.offset + rate;
        }
        GlucoseSeries::new(self.subject_id.clone(), self.t0, self.rate, out)
    }

    /// Calendar span between first and last reading, in days.
    pub fn span_days(&self) -> f64 {
        match (self.readings.first(), self.readings.last()) {
            (Some(a), Some(b)) => (b.offset - a.offset) as f64 / 1440.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassSetName {
    #[serde(rename = "I")]
    SetI,
    #[serde(rename = "II")]
    SetII,
    #[serde(rename = "III")]
    SetIII,
}

impl ClassSetName {
    pub fn roman(self) -> &'static str {
        match self {
            ClassSetName::SetI => "I",
            ClassSetName::SetII => "II",
            ClassSetName::SetIII => "III",
        }
    }
}

impl fmt::Display for ClassSetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.roman())
    }
}

impl FromStr for ClassSetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase();
        match norm.trim_start_matches("SET_").trim_start_matches("SET") {
            "I" | "1" => Ok(ClassSetName::SetI),
            "II" | "2" => Ok(ClassSetName::SetII),
            "III" | "3" => Ok(ClassSetName::SetIII),
            _ => Err(Error::Config(format!("unknown class set '{s}' (expected I, II or III)"))),
        }
    }
}

/// Minutes-before-onset interval `[lo, hi]` mapped to a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBin {
    pub class: u8,
    pub lo_minutes: u32,
    pub hi_minutes: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSetSpec {
    pub name: ClassSetName,
    pub bins: Vec<ClassBin>,
}

const fn bin(class: u8, lo_minutes: u32, hi_minutes: u32) -> ClassBin {
    ClassBin {
        class,
        lo_minutes,
        hi_minutes,
    }
}

pub fn class_set(name: ClassSetName) -> ClassSetSpec {
    let bins = match name {
        ClassSetName::SetI => vec![bin(1, 5, 10), bin(2, 15, 25), bin(3, 30, 55), bin(4, 60, 120)],
        ClassSetName::SetII => vec![bin(1, 5, 15), bin(2, 20, 45), bin(3, 50, 120)],
        ClassSetName::SetIII => vec![bin(1, 5, 20), bin(2, 25, 60), bin(3, 65, 120)],
    };
    ClassSetSpec { name, bins }
}

impl ClassSetSpec {
    /// Event class plus one class per bin.
    pub fn num_classes(&self) -> usize {
        self.bins.len() + 1
    }

    /// Class of a point `delta` minutes before the next event point; `None`
    /// beyond the risk horizon. `delta == 0` is the event class.
    pub fn class_of(&self, delta_minutes: u32) -> Option<u8> {
        if delta_minutes == 0 {
            return Some(EVENT_CLASS);
        }
        self.bins.iter().find(|b| delta_minutes <= b.hi_minutes).map(|b| b.class)
    }
}

/// Per-point label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PointLabel {
    Class(u8),
    NoRisk,
    /// Binary scheme: event or within the risk horizon of one.
    Risk,
    /// Missing glucose; never a training target.
    Unlabeled,
}

impl PointLabel {
    pub fn token(self) -> String {
        match self {
            PointLabel::Class(c) => c.to_string(),
            PointLabel::NoRisk => "NO_RISK".into(),
            PointLabel::Risk => "RISK".into(),
            PointLabel::Unlabeled => String::new(),
        }
    }

    pub fn parse(s: &str) -> Result<PointLabel> {
        match s.trim() {
            "" => Ok(PointLabel::Unlabeled),
            "NO_RISK" => Ok(PointLabel::NoRisk),
            "RISK" => Ok(PointLabel::Risk),
            t => t
                .parse::<u8>()
                .map(PointLabel::Class)
                .map_err(|_| Error::Invalid(format!("bad label token '{t}'"))),
        }
    }

    /// Target index for a multi-class model; `None` for labels the model
    /// does not train on.
    pub fn class_index(self) -> Option<usize> {
        match self {
            PointLabel::Class(c) => Some(c as usize),
            _ => None,
        }
    }

    /// Target index in the binary scheme: 1 = risk, 0 = no risk.
    pub fn binary_index(self) -> Option<usize> {
        match self {
            PointLabel::Risk => Some(1),
            PointLabel::NoRisk => Some(0),
            _ => None,
        }
    }
}

/// A normalized input window labeled by its last point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub subject_id: String,
    /// Absolute minutes of the last point.
    pub end_time: i64,
    pub features: Vec<f64>,
    pub label: PointLabel,
    pub age_group: AgeGroup,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_group_boundaries() {
        assert_eq!(age_group_of(0), AgeGroup::G0To13);
        assert_eq!(age_group_of(13), AgeGroup::G0To13);
        assert_eq!(age_group_of(14), AgeGroup::G14To20);
        assert_eq!(age_group_of(20), AgeGroup::G14To20);
        assert_eq!(age_group_of(21), AgeGroup::G21To44);
        assert_eq!(age_group_of(44), AgeGroup::G21To44);
        assert_eq!(age_group_of(45), AgeGroup::G45Plus);
        assert_eq!(age_group_of(120), AgeGroup::G45Plus);
    }

    #[test]
    fn age_group_is_monotone() {
        let mut prev = age_group_of(0);
        for a in 1..200 {
            let g = age_group_of(a);
            assert!(g >= prev);
            prev = g;
        }
    }

    #[test]
    fn open_intervals() {
        assert_eq!(age_group_of_interval(60, None), AgeGroup::G45Plus);
        assert_eq!(age_group_of_interval(30, None), AgeGroup::Unknown);
        assert_eq!(age_group_of_interval(15, Some(18)), AgeGroup::G14To20);
        assert_eq!(age_group_of_interval(10, Some(15)), AgeGroup::Unknown);
        assert_eq!(age_group_of_interval(50, Some(70)), AgeGroup::G45Plus);
    }

    #[test]
    fn class_set_tables() {
        let s2 = class_set(ClassSetName::SetII);
        assert_eq!(s2.bins, vec![bin(1, 5, 15), bin(2, 20, 45), bin(3, 50, 120)]);
        assert_eq!(class_set(ClassSetName::SetI).bins.len(), 4);
        assert_eq!(class_set(ClassSetName::SetIII).bins, vec![bin(1, 5, 20), bin(2, 25, 60), bin(3, 65, 120)]);
    }

    #[test]
    fn class_sets_cover_every_lead_time_once() {
        for name in [ClassSetName::SetI, ClassSetName::SetII, ClassSetName::SetIII] {
            let spec = class_set(name);
            for w in spec.bins.windows(2) {
                assert!(w[0].hi_minutes < w[1].lo_minutes);
            }
            for delta in (5..=120).step_by(5) {
                let hits: Vec<_> = spec.bins.iter().filter(|b| (b.lo_minutes..=b.hi_minutes).contains(&delta)).collect();
                assert_eq!(hits.len(), 1, "{name} delta {delta}");
                assert_eq!(spec.class_of(delta), Some(hits[0].class));
            }
            assert_eq!(spec.class_of(0), Some(0));
            assert_eq!(spec.class_of(125), None);
        }
    }

    #[test]
    fn class_set_parsing() {
        assert_eq!("II".parse::<ClassSetName>().unwrap(), ClassSetName::SetII);
        assert_eq!("SET_III".parse::<ClassSetName>().unwrap(), ClassSetName::SetIII);
        assert_eq!("1".parse::<ClassSetName>().unwrap(), ClassSetName::SetI);
        assert!(matches!("IV".parse::<ClassSetName>(), Err(Error::Config(_))));
    }

    #[test]
    fn densify_fills_absent_grid_points() {
        let s = GlucoseSeries::new("a", 0, 5, vec![Reading::new(0, Some(1.0)), Reading::new(15, Some(2.0))]);
        let d = s.densify();
        assert_eq!(d.values(), vec![Some(1.0), None, None, Some(2.0)]);
        assert!(d.is_dense());
    }

    #[test]
    fn label_tokens_round_trip() {
        for l in [PointLabel::Class(3), PointLabel::NoRisk, PointLabel::Risk, PointLabel::Unlabeled] {
            assert_eq!(PointLabel::parse(&l.token()).unwrap(), l);
        }
    }
}
