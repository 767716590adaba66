//! Seeded synthetic CGM cohorts with known hypoglycemia episodes.
//!
//! Each subject gets its own ChaCha8 stream (`seed`, stream = subject
//! index). The background is a daily sinusoid plus AR(1) noise. An episode
//! is a linear descent over the 120 minutes before onset, a nadir plateau at
//! or below 70 mg/dL, and a linear recovery back to the background.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::artifacts::{save_dataset, write_file, Dataset};
use crate::domain::{AgeGroup, GlucoseSeries, Reading, Sex, Subject, BASE_RATE_MINUTES, RISK_HORIZON_MINUTES};
use crate::error::{Error, Result};

const STEP: i64 = BASE_RATE_MINUTES as i64;
const POINTS_PER_DAY: f64 = 288.0;
/// Descent points: Δ = 120, 115, …, 5.
const DESCENT_POINTS: usize = (RISK_HORIZON_MINUTES / BASE_RATE_MINUTES) as usize;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupOverride {
    pub baseline: Option<f64>,
    pub amplitude: Option<f64>,
    pub noise_std: Option<f64>,
    pub ramp_floor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub group: AgeGroup,
    pub n_subjects: usize,
    #[serde(default)]
    pub overrides: GroupOverride,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub groups: Vec<GroupSpec>,
    pub days: f64,
    /// Absolute minute of the first reading (multiple of 5).
    pub start_minute: i64,
    pub baseline: f64,
    /// Half peak-to-peak of the daily cycle.
    pub amplitude: f64,
    pub ar_coef: f64,
    /// Stationary standard deviation of the AR(1) component.
    pub noise_std: f64,
    pub episodes_per_day: f64,
    pub hypo_minutes: u32,
    pub recovery_minutes: u32,
    /// Quiet time between one recovery and the next descent.
    pub min_spacing_minutes: u32,
    /// Descent value 5 minutes before onset.
    pub ramp_floor: f64,
    pub ramp_noise_std: f64,
    pub nadir_min: f64,
    pub nadir_max: f64,
    pub gaps_per_day: f64,
    /// Gap lengths in grid points, drawn uniformly.
    pub gap_points: Vec<usize>,
    pub outliers_per_day: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            groups: AgeGroup::KNOWN
                .iter()
                .map(|&group| GroupSpec {
                    group,
                    n_subjects: 4,
                    overrides: GroupOverride::default(),
                })
                .collect(),
            days: 7.0,
            start_minute: 26_297_280, // 2020-01-01T00:00Z
            baseline: 180.0,
            amplitude: 55.0,
            ar_coef: 0.9,
            noise_std: 5.0,
            episodes_per_day: 0.5,
            hypo_minutes: 20,
            recovery_minutes: 60,
            min_spacing_minutes: 60,
            ramp_floor: 75.0,
            ramp_noise_std: 0.0,
            nadir_min: 45.0,
            nadir_max: 69.0,
            gaps_per_day: 0.5,
            gap_points: vec![1, 2, 3, 5, 8, 12, 30],
            outliers_per_day: 0.2,
        }
    }
}

impl SynthConfig {
    /// Cohort with `n` subjects in each known age group.
    pub fn with_subjects_per_group(mut self, n: usize) -> Self {
        for g in &mut self.groups {
            g.n_subjects = n;
        }
        self
    }

    /// No missingness, outliers or descent noise.
    pub fn clean(mut self) -> Self {
        self.gaps_per_day = 0.0;
        self.outliers_per_day = 0.0;
        self.ramp_noise_std = 0.0;
        self
    }

    /// Children descend along the adult curve shifted 60 minutes earlier:
    /// a child window `Δ` minutes before onset matches an adult window at
    /// `Δ + 60`, so a pooled model confuses the two while a children-only
    /// model can separate them.
    pub fn counterexample(mut self) -> Self {
        let slope = (self.baseline - self.ramp_floor) / (RISK_HORIZON_MINUTES - BASE_RATE_MINUTES) as f64;
        let floor = self.ramp_floor + slope * 60.0;
        for g in &mut self.groups {
            if g.group == AgeGroup::G0To13 {
                g.overrides = GroupOverride {
                    baseline: Some(floor + (self.baseline - self.ramp_floor)),
                    amplitude: Some(80.0),
                    noise_std: None,
                    ramp_floor: Some(floor),
                };
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.days.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("days must be positive");
        }
        if self.start_minute.rem_euclid(STEP) != 0 {
            return bad("start_minute must be a multiple of 5");
        }
        if !(0.0..1.0).contains(&self.ar_coef) || self.noise_std < 0.0 || self.ramp_noise_std < 0.0 {
            return bad("ar_coef must lie in [0, 1) and noise levels be non-negative");
        }
        if self.episodes_per_day < 0.0 || self.gaps_per_day < 0.0 || self.outliers_per_day < 0.0 {
            return bad("rates must be non-negative");
        }
        if !(self.nadir_min <= self.nadir_max && self.nadir_max <= 70.0 && self.nadir_min > 0.0) {
            return bad("nadir range must lie within (0, 70]");
        }
        if self.ramp_floor <= 70.0 {
            return bad("ramp_floor must stay above 70 so only the plateau is hypoglycemic");
        }
        if self.hypo_minutes < BASE_RATE_MINUTES || !self.hypo_minutes.is_multiple_of(BASE_RATE_MINUTES) || !self.recovery_minutes.is_multiple_of(BASE_RATE_MINUTES) {
            return bad("episode durations must be positive multiples of 5 minutes");
        }
        if self.gap_points.is_empty() && self.gaps_per_day > 0.0 {
            return bad("gap_points is empty");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub subject_id: String,
    /// Absolute minute of the first value at or below 70.
    pub onset_minute: i64,
    pub nadir: f64,
    pub hypo_minutes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<Subject>,
    pub series: Vec<GlucoseSeries>,
    pub episodes: Vec<Episode>,
}

fn prefix(group: AgeGroup) -> &'static str {
    match group {
        AgeGroup::G0To13 => "child",
        AgeGroup::G14To20 => "teen",
        AgeGroup::G21To44 => "adult",
        AgeGroup::G45Plus => "senior",
        AgeGroup::Unknown => "anon",
    }
}

fn age_for(group: AgeGroup, rng: &mut ChaCha8Rng) -> Option<u32> {
    match group.age_range()? {
        (lo, Some(hi)) => Some(rng.random_range(lo.max(2)..=hi)),
        (lo, None) => Some(rng.random_range(lo..=80)),
    }
}

struct Profile {
    baseline: f64,
    amplitude: f64,
    noise_std: f64,
    ramp_floor: f64,
}

fn generate_subject(cfg: &SynthConfig, spec: &GroupSpec, index: u64, local: usize) -> (Subject, GlucoseSeries, Vec<Episode>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let o = &spec.overrides;
    let p = Profile {
        baseline: o.baseline.unwrap_or(cfg.baseline),
        amplitude: o.amplitude.unwrap_or(cfg.amplitude),
        noise_std: o.noise_std.unwrap_or(cfg.noise_std),
        ramp_floor: o.ramp_floor.unwrap_or(cfg.ramp_floor),
    };
    let id = format!("{}_{local:03}", prefix(spec.group));
    let sex = if rng.random::<bool>() { Sex::F } else { Sex::M };
    let subject = Subject::new(id.clone(), age_for(spec.group, &mut rng), sex);

    let n = (cfg.days * POINTS_PER_DAY).round() as usize;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let innov = p.noise_std * (1.0 - cfg.ar_coef * cfg.ar_coef).sqrt();
    let mut ar = p.noise_std * rng.sample::<f64, _>(StandardNormal);
    let mut values: Vec<f64> = (0..n)
        .map(|i| {
            if i > 0 {
                ar = cfg.ar_coef * ar + innov * rng.sample::<f64, _>(StandardNormal);
            }
            let day = (i as f64 / POINTS_PER_DAY) * std::f64::consts::TAU;
            p.baseline + p.amplitude * (day + phase).sin() + ar
        })
        .collect();

    // Episode schedule: exponential waiting times on top of the dead time
    // each episode needs.
    let hypo = (cfg.hypo_minutes / BASE_RATE_MINUTES) as usize;
    let rec = (cfg.recovery_minutes / BASE_RATE_MINUTES) as usize;
    let spacing = (cfg.min_spacing_minutes / BASE_RATE_MINUTES) as usize;
    let wait = (cfg.episodes_per_day > 0.0).then(|| Exp::new(cfg.episodes_per_day / POINTS_PER_DAY).expect("positive rate"));
    let mut in_event = vec![false; n];
    let mut protected = vec![false; n];
    let mut episodes = Vec::new();
    if let Some(wait) = wait {
        let mut cursor = DESCENT_POINTS as f64 + wait.sample(&mut rng);
        loop {
            let onset = cursor.floor() as usize;
            if onset + hypo + rec > n {
                break;
            }
            let nadir = rng.random_range(cfg.nadir_min..=cfg.nadir_max);
            for j in 1..=DESCENT_POINTS {
                let delta = (j as i64 * STEP) as f64;
                let frac = (delta - STEP as f64) / (RISK_HORIZON_MINUTES as i64 - STEP) as f64;
                let noise = if cfg.ramp_noise_std > 0.0 {
                    cfg.ramp_noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                let v = p.ramp_floor + frac * (p.baseline - p.ramp_floor) + noise;
                values[onset - j] = v.max(70.5);
                protected[onset - j] = true;
            }
            for k in 0..hypo {
                values[onset + k] = nadir;
                in_event[onset + k] = true;
            }
            let end = onset + hypo + rec;
            let target = values.get(end).copied().unwrap_or(p.baseline).max(70.5);
            for k in 0..rec {
                let t = (k + 1) as f64 / (rec + 1) as f64;
                values[onset + hypo + k] = p.ramp_floor + t * (target - p.ramp_floor);
                protected[onset + hypo + k] = true;
            }
            episodes.push(Episode {
                subject_id: id.clone(),
                onset_minute: cfg.start_minute + onset as i64 * STEP,
                nadir,
                hypo_minutes: cfg.hypo_minutes,
            });
            cursor = (end + DESCENT_POINTS + spacing) as f64 + wait.sample(&mut rng);
        }
    }

    let mut glucose: Vec<Option<f64>> = values.into_iter().map(Some).collect();
    // Outliers and gaps never touch the hypoglycemic plateau.
    let days = cfg.days;
    let n_out = poisson_count(&mut rng, cfg.outliers_per_day * days);
    for _ in 0..n_out {
        let i = rng.random_range(0..n);
        if !in_event[i] && !protected[i] {
            glucose[i] = Some(if rng.random::<bool>() { rng.random_range(505.0..700.0) } else { rng.random_range(5.0..35.0) });
        }
    }
    let n_gaps = poisson_count(&mut rng, cfg.gaps_per_day * days);
    for _ in 0..n_gaps {
        let len = cfg.gap_points[rng.random_range(0..cfg.gap_points.len())];
        let start = rng.random_range(0..n);
        for i in start..(start + len).min(n) {
            if !in_event[i] {
                glucose[i] = None;
            }
        }
    }

    let readings: Vec<Reading> = glucose
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| g.map(|g| Reading::new(i as i64 * STEP, Some(g))))
        .collect();
    let series = GlucoseSeries::new(id, cfg.start_minute, BASE_RATE_MINUTES, readings);
    (subject, series, episodes)
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let d = rand_distr::Poisson::new(mean).expect("positive mean");
    d.sample(rng) as usize
}

/// Generates the cohort; missing readings are dropped rows, as in raw
/// sensor exports.
pub fn generate_cohort(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    let mut index = 0u64;
    for spec in &cfg.groups {
        for local in 0..spec.n_subjects {
            jobs.push((spec, index, local));
            index += 1;
        }
    }
    use rayon::prelude::*;
    let mut out: Vec<_> = jobs.par_iter().map(|&(spec, idx, local)| generate_subject(cfg, spec, idx, local)).collect();
    out.sort_by(|a, b| a.0.subject_id.cmp(&b.0.subject_id));
    let mut cohort = Cohort {
        subjects: Vec::with_capacity(out.len()),
        series: Vec::with_capacity(out.len()),
        episodes: Vec::new(),
    };
    for (s, g, e) in out {
        cohort.subjects.push(s);
        cohort.series.push(g);
        cohort.episodes.extend(e);
    }
    Ok(cohort)
}

/// Writes the cohort as a raw-stage artifact directory plus `episodes.csv`.
pub fn write_cohort(dir: &Path, cohort: &Cohort) -> Result<()> {
    let ds = Dataset::new("raw", BASE_RATE_MINUTES, cohort.subjects.clone(), cohort.series.clone());
    save_dataset(dir, &ds, None)?;
    let mut csv = String::from("subject_id,onset_minute,nadir_mgdl,hypo_minutes\n");
    for e in &cohort.episodes {
        csv.push_str(&format!("{},{},{},{}\n", e.subject_id, e.onset_minute, e.nadir, e.hypo_minutes));
    }
    write_file(&dir.join("episodes.csv"), csv.as_bytes())
}
