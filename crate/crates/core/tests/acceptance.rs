//! Acceptance criteria, one PASS/FAIL/SKIP line each.
//!
//! Runs as a plain binary so every line is printed regardless of test
//! capture. `ACCEPTANCE_ONLY=2,5` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use glyconet::artifacts::Dataset;
use glyconet::cohort_stats::{studentized_range_q, tukey_hsd};
use glyconet::experiments::{train_population, Prepared, Scope, TrainConfig};
use glyconet::ingestion::{ingest_glucose, ingest_subjects};
use glyconet::labeling::{class_distribution, label_dataset, label_series, LabelScheme};
use glyconet::nn::{focal_loss, Architecture, FcnModel, FocalLossConfig, Matrix, Mode, Tensor3};
use glyconet::preprocess::{impute_series, preprocess_dataset, GapTreatment};
use glyconet::stineman;
use glyconet::synth::{generate_cohort, SynthConfig};
use glyconet::windowing::{make_windows, split_boundaries, window_length, Scaler};
use glyconet::{AgeGroup, ClassSetName, GlucoseSeries, PointLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = fn() -> Outcome;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed.as_secs() < limit_s
}

// 1 ------------------------------------------------------------------------

fn c1_scope_note() -> Outcome {
    Outcome::Skip("published table numbers need the full corpus; covered by criteria 2-11".into())
}

// 2 ------------------------------------------------------------------------

fn c2_gradients() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = Architecture {
        channels: vec![6, 8, 6],
        kernels: vec![8, 5, 3],
    };
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for len in [7, 25] {
        for classes in [4, 5] {
            let mut model = FcnModel::new(&arch, len, classes, rng.random()).unwrap();
            let x = Tensor3::from_vec(4, 1, len, (0..4 * len).map(|_| rng.random()).collect()).unwrap();
            let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..classes)).collect();
            let loss = FocalLossConfig {
                gamma: 2.0,
                alpha: (0..classes).map(|_| rng.random_range(0.25..4.0)).collect(),
            };
            let cache = model.forward_cached(&x, Mode::Train).unwrap();
            let grads = model.backward(&cache, &y, &loss).unwrap().1;
            for (t, g) in grads.tensors.iter().enumerate() {
                for (i, &a) in g.iter().enumerate() {
                    let orig = model.parameters_mut()[t][i];
                    model.parameters_mut()[t][i] = orig + H;
                    let up = model.loss(&x, &y, &loss, Mode::Train).unwrap();
                    model.parameters_mut()[t][i] = orig - H;
                    let down = model.loss(&x, &y, &loss, Mode::Train).unwrap();
                    model.parameters_mut()[t][i] = orig;
                    let n = (up - down) / (2.0 * H);
                    // Conv biases before batch norm have exact zero gradient;
                    // the 1e-6 floor turns those into an absolute check.
                    worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-6));
                    checked += 1;
                }
            }
        }
    }
    let el = start.elapsed();
    verdict(
        worst < 1e-4 && within(el, 120),
        format!("{checked} parameters, worst relative error {worst:.2e}, {:.1}s", el.as_secs_f64()),
    )
}

// 3 ------------------------------------------------------------------------

fn c3_focal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..64);
        let c = rng.random_range(2..7);
        let mut probs = Vec::with_capacity(n * c);
        for _ in 0..n {
            let logits: Vec<f64> = (0..c).map(|_| 3.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let ce = -(0..n).map(|i| probs[i * c + y[i]].max(1e-12).ln()).sum::<f64>() / n as f64;
        let m = Matrix::from_vec(n, c, probs).unwrap();
        let fl = focal_loss(&m, &y, &FocalLossConfig::uniform(c, 0.0)).unwrap().loss;
        worst = worst.max((fl - ce).abs());
    }
    let half = Matrix::from_vec(1, 2, vec![0.5, 0.5]).unwrap();
    let hand = focal_loss(&half, &[0], &FocalLossConfig::uniform(2, 2.0)).unwrap().loss;
    let hand_err = (hand - 0.25 * std::f64::consts::LN_2).abs();
    verdict(
        worst <= 1e-12 && hand_err <= 1e-12,
        format!("max |FL(γ=0) − CE| = {worst:.1e} over 1000 batches; |FL(γ=2, p=½) − ¼ln2| = {hand_err:.1e}"),
    )
}

// 4 ------------------------------------------------------------------------

/// Class bins (class, lo, hi) in minutes before onset.
fn bins(name: ClassSetName) -> Vec<(u8, u32, u32)> {
    match name {
        ClassSetName::SetI => vec![(1, 5, 10), (2, 15, 25), (3, 30, 55), (4, 60, 120)],
        ClassSetName::SetII => vec![(1, 5, 15), (2, 20, 45), (3, 50, 120)],
        ClassSetName::SetIII => vec![(1, 5, 20), (2, 25, 60), (3, 65, 120)],
    }
}

/// One pass per class: walk back from every event and claim the points
/// whose distance falls in the class bin.
fn sweep_labels(values: &[Option<f64>], bins: &[(u8, u32, u32)], rate: u32) -> Vec<PointLabel> {
    let mut labels: Vec<PointLabel> = values
        .iter()
        .map(|v| match v {
            None => PointLabel::Unlabeled,
            Some(g) if *g <= 70.0 => PointLabel::Class(0),
            Some(_) => PointLabel::NoRisk,
        })
        .collect();
    let events: Vec<usize> = (0..values.len()).filter(|&i| labels[i] == PointLabel::Class(0)).collect();
    for &(class, lo, hi) in bins {
        for &e in &events {
            for k in 1..=e {
                let i = e - k;
                match values[i] {
                    Some(v) if v > 70.0 => {}
                    _ => break,
                }
                let d = k as u32 * rate;
                if d > hi {
                    break;
                }
                if d >= lo && labels[i] == PointLabel::NoRisk {
                    labels[i] = PointLabel::Class(class);
                }
            }
        }
    }
    labels
}

fn c4_labeling() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0usize;
    let mut points = 0usize;
    for case in 0..1000 {
        let n = rng.random_range(50..=2000);
        let density = rng.random_range(0.0..0.2);
        let missing = rng.random_range(0.0..0.05);
        let values: Vec<Option<f64>> = (0..n)
            .map(|_| {
                if rng.random_bool(missing) {
                    None
                } else if rng.random_bool(density) {
                    Some(if rng.random_bool(0.1) { 70.0 } else { rng.random_range(40.0..70.0) })
                } else {
                    Some(rng.random_range(70.0001..300.0))
                }
            })
            .collect();
        let series = GlucoseSeries::from_grid(format!("s{case}"), 0, 5, &values);
        for name in [ClassSetName::SetI, ClassSetName::SetII, ClassSetName::SetIII] {
            let got = label_series(&series, LabelScheme::Classes(name)).labels;
            let want = sweep_labels(&values, &bins(name), 5);
            mismatches += got.iter().zip(&want).filter(|(a, b)| a != b).count();
            points += n;
        }
    }
    let el = start.elapsed();
    verdict(
        mismatches == 0 && within(el, 60),
        format!("{mismatches} mismatches over {points} labels, {:.1}s", el.as_secs_f64()),
    )
}

// 5 ------------------------------------------------------------------------

fn c5_imputation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut linear, mut stine, mut monotone_checked, mut open) = (0usize, 0usize, 0usize, 0usize);
    let mut failures: Vec<String> = Vec::new();
    for case in 0..500 {
        let n = 400;
        let mut y = rng.random_range(80.0..250.0);
        let mut truth = Vec::with_capacity(n);
        for _ in 0..n {
            y += 6.0 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            y = y.clamp(45.0, 480.0);
            truth.push(y);
        }
        let mut values: Vec<Option<f64>> = truth.iter().map(|v| Some(*v)).collect();
        let mut i = 2;
        while i < n - 45 {
            if rng.random_bool(0.08) {
                let len = match rng.random_range(0..3) {
                    0 => rng.random_range(1..=5),
                    1 => rng.random_range(6..=23),
                    _ => rng.random_range(24..=40),
                };
                for v in &mut values[i..i + len] {
                    *v = None;
                }
                i += len + rng.random_range(2..6);
            } else {
                i += 1;
            }
        }
        let series = GlucoseSeries::from_grid(format!("s{case}"), 0, 5, &values);
        let (out, report) = impute_series(&series).unwrap();
        let got: Vec<Option<f64>> = out.values();
        for (k, v) in values.iter().enumerate() {
            if v.is_some() && got[k] != *v {
                failures.push(format!("case {case}: observed point {k} changed"));
            }
        }
        for gap in &report.gaps {
            let a = (gap.start_offset / 5) as usize;
            let b = a + (gap.length_minutes / 5) as usize;
            match gap.treatment {
                GapTreatment::LeftOpen => {
                    open += 1;
                    if got[a..b].iter().any(Option::is_some) {
                        failures.push(format!("case {case}: open gap at {a} was filled"));
                    }
                }
                GapTreatment::Linear => {
                    linear += 1;
                    let (y0, y1) = (values[a - 1].unwrap(), values[b].unwrap());
                    for (k, g) in got.iter().enumerate().take(b).skip(a) {
                        let want = y0 + (k - a + 1) as f64 / (b - a + 1) as f64 * (y1 - y0);
                        if (g.unwrap() - want).abs() > 1e-9 {
                            failures.push(format!("case {case}: linear fill at {k} is {g:?}, line gives {want}"));
                        }
                    }
                }
                GapTreatment::Stineman => {
                    stine += 1;
                    let (l, r) = (a - 1, b);
                    let prev = (0..l).rev().find(|&k| values[k].is_some()).filter(|&p| (l - p - 1) * 5 < 120);
                    let next = (r + 1..n).find(|&k| values[k].is_some()).filter(|&q| (q - r - 1) * 5 < 120);
                    let knots: Vec<usize> = prev.into_iter().chain([l, r]).chain(next).collect();
                    let kx: Vec<f64> = knots.iter().map(|&k| k as f64 * 5.0).collect();
                    let ky: Vec<f64> = knots.iter().map(|&k| values[k].unwrap()).collect();
                    let at_knots = stineman::interpolate(&kx, &ky, &kx);
                    if at_knots.iter().zip(&ky).any(|(g, w)| g.is_none_or(|g| (g - w).abs() > 1e-9)) {
                        failures.push(format!("case {case}: interpolant misses a knot"));
                    }
                    let fills: Vec<f64> = got[a..b].iter().map(|v| v.unwrap()).collect();
                    if fills.iter().any(|v| !(40.0..=500.0).contains(v)) {
                        failures.push(format!("case {case}: stineman fill outside [40, 500]"));
                    }
                    let secants: Vec<f64> = kx.windows(2).zip(ky.windows(2)).map(|(x, y)| (y[1] - y[0]) / (x[1] - x[0])).collect();
                    let same_sign = secants.iter().all(|s| *s > 0.0) || secants.iter().all(|s| *s < 0.0);
                    if same_sign {
                        monotone_checked += 1;
                        let (y0, y1) = (values[l].unwrap(), values[r].unwrap());
                        let sign = (y1 - y0).signum();
                        let path: Vec<f64> = std::iter::once(y0).chain(fills.iter().copied()).chain([y1]).collect();
                        if path.windows(2).any(|w| (w[1] - w[0]) * sign < -1e-9) {
                            failures.push(format!("case {case}: stineman fill at {a} has an interior extremum"));
                        }
                    }
                }
            }
        }
    }
    let detail = format!(
        "{linear} linear, {stine} stineman ({monotone_checked} monotone-checked), {open} open gaps; {} violations{}",
        failures.len(),
        failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
    );
    verdict(failures.is_empty() && linear > 0 && monotone_checked > 0 && open > 0, detail)
}

// 6 ------------------------------------------------------------------------

fn c6_tukey() -> Outcome {
    let groups = vec![
        ("a".to_string(), vec![120.0, 131.0, 118.0, 125.0, 129.0]),
        ("b".to_string(), vec![140.0, 152.0, 147.0, 139.0, 150.0]),
        ("c".to_string(), vec![122.0, 119.0, 133.0, 127.0, 124.0]),
    ];
    let res = tukey_hsd(&groups, 0.05).unwrap();
    // Hand evaluation: pooled within-group variance with 12 df, and the
    // 5% studentized range point for k = 3 interpolated in ln(df) between
    // the df = 10 (3.87678) and df = 20 (3.57793) table entries.
    let means: Vec<f64> = groups.iter().map(|(_, v)| v.iter().sum::<f64>() / 5.0).collect();
    let ssw: f64 = groups.iter().zip(&means).map(|((_, v), m)| v.iter().map(|x| (x - m).powi(2)).sum::<f64>()).sum();
    let mse = ssw / 12.0;
    let q = 3.87678 + (3.57793 - 3.87678) * (12f64 / 10.0).ln() / 2f64.ln();
    let half = q / 2f64.sqrt() * (mse * (1.0 / 5.0 + 1.0 / 5.0)).sqrt();
    let mut worst = (res.mse - mse).abs().max((res.q - q).abs());
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let p = res
            .pairs
            .iter()
            .find(|p| p.group_a == groups[i].0 && p.group_b == groups[j].0)
            .expect("pair present");
        let diff = means[j] - means[i];
        worst = worst
            .max((p.mean_diff - diff).abs())
            .max((p.ci_lower - (diff - half)).abs())
            .max((p.ci_upper - (diff + half)).abs());
        if p.reject_null != (diff.abs() > half) {
            worst = f64::INFINITY;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let trials = 200;
    let mut rejections = 0;
    for _ in 0..trials {
        let g: Vec<(String, Vec<f64>)> = (0..3)
            .map(|k| (format!("g{k}"), (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect()))
            .collect();
        if tukey_hsd(&g, 0.05).unwrap().pairs.iter().any(|p| p.reject_null) {
            rejections += 1;
        }
    }
    let rate = rejections as f64 / trials as f64;
    let q_inf = studentized_range_q(3, 29_997.0, 0.05).unwrap();
    verdict(
        worst <= 1e-6 && (0.01..=0.12).contains(&rate),
        format!("max deviation from hand HSD {worst:.1e}; null rejection rate {rate:.3} over {trials} trials (q = {q_inf:.4})"),
    )
}

// 7 ------------------------------------------------------------------------

fn cleaned_cohort(cfg: &SynthConfig) -> Dataset {
    let cohort = generate_cohort(cfg).unwrap();
    let raw = Dataset::new("raw", 5, cohort.subjects, cohort.series);
    preprocess_dataset(&raw, 5).unwrap().0
}

fn prepared(cfg: &SynthConfig, test_per_group: usize) -> Prepared {
    let labeled = label_dataset(&cleaned_cohort(cfg), LabelScheme::Classes(ClassSetName::SetII)).unwrap();
    Prepared::from_dataset(&labeled, 30, test_per_group, &Scaler::default()).unwrap()
}

fn c7_windowing() -> Outcome {
    let expected = [(30, 7), (45, 10), (60, 13), (90, 19), (120, 25)];
    let lengths_ok = expected.iter().all(|&(isl, l)| window_length(isl, 5).unwrap() == l);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut count_ok = true;
    for _ in 0..50 {
        let n: usize = rng.random_range(30..500);
        let values: Vec<Option<f64>> = (0..n).map(|_| Some(rng.random_range(40.0..500.0))).collect();
        let s = GlucoseSeries::from_grid("s", 0, 5, &values);
        let labels = label_series(&s, LabelScheme::Classes(ClassSetName::SetII)).labels;
        for (isl, l) in expected {
            let w = make_windows(&s, &labels, AgeGroup::G21To44, isl, &Scaler::default()).unwrap();
            count_ok &= w.len() == n.saturating_sub(l - 1);
        }
    }

    let prep = prepared(&SynthConfig { seed: 7, days: 14.0, ..SynthConfig::default() }, 0);
    let span = (window_length(30, 5).unwrap() as i64 - 1) * 5;
    let ids: Vec<String> = prep.plan.all_train().into_iter().map(String::from).collect();
    let mut overlaps = Vec::new();
    let mut split = 0;
    for id in &ids {
        let w = prep.subject_windows(id);
        let Some(b) = split_boundaries(w, 30) else { continue };
        split += 1;
        let last_train_end = w[..b.train_end].iter().map(|x| x.end_time).max().unwrap_or(i64::MIN);
        let first_test_start = w[b.test_start..].iter().map(|x| x.end_time - span).min().unwrap_or(i64::MAX);
        if last_train_end >= first_test_start {
            overlaps.push(id.clone());
        }
    }
    verdict(
        lengths_ok && count_ok && overlaps.is_empty() && split > 0,
        format!(
            "lengths {}, counts {}, {} of {split} split subjects overlap{}",
            if lengths_ok { "ok" } else { "wrong" },
            if count_ok { "ok" } else { "wrong" },
            overlaps.len(),
            if overlaps.is_empty() { String::new() } else { format!(" ({})", overlaps.join(" ")) }
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn c8_learnability() -> Outcome {
    let start = Instant::now();
    let cfg = SynthConfig {
        seed: 8,
        days: 30.0,
        ramp_noise_std: 0.0,
        ..SynthConfig::default()
    }
    .with_subjects_per_group(12);
    let prep = prepared(&cfg, 2);
    let train_cfg = TrainConfig {
        batch_size: 128,
        epochs: 20,
        ..TrainConfig::gpb()
    };
    let run = train_population(&prep, &Scope::Global, &train_cfg).unwrap();
    let m = &run.evaluation.overall.macro_avg;
    let el = start.elapsed();
    verdict(
        m.recall >= 0.95 && m.pr_auc >= 0.97 && run.train_subjects.len() == 40 && run.evaluation.per_subject.len() == 8 && within(el, 900),
        format!(
            "{} train / {} test subjects, {} windows; macro recall {:.4}, PR-AUC {:.4}, {:.0}s",
            run.train_subjects.len(),
            run.evaluation.per_subject.len(),
            run.train_windows,
            m.recall,
            m.pr_auc,
            el.as_secs_f64()
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn c9_counterexample() -> Outcome {
    let cfg = SynthConfig {
        seed: 9,
        days: 20.0,
        ..SynthConfig::default()
    }
    .with_subjects_per_group(8)
    .counterexample();
    let prep = prepared(&cfg, 2);
    let train_cfg = TrainConfig {
        batch_size: 128,
        epochs: 20,
        ..TrainConfig::gpb()
    };
    let children = AgeGroup::G0To13;
    let gpb = train_population(&prep, &Scope::Global, &train_cfg).unwrap();
    let aspb = train_population(&prep, &Scope::AgeGroup(children), &train_cfg).unwrap();
    let g = gpb.evaluation.per_group[&children].macro_avg.recall;
    let a = aspb.evaluation.per_group[&children].macro_avg.recall;
    verdict(a - g >= 0.03, format!("children recall ASPB {a:.4} vs GPB {g:.4}, delta {:.4}", a - g))
}

// 10 -----------------------------------------------------------------------

fn c10_determinism() -> Outcome {
    let prep = prepared(&SynthConfig { seed: 10, days: 10.0, ..SynthConfig::default() }.with_subjects_per_group(3), 1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let cfg = TrainConfig {
                batch_size: 128,
                epochs: 2,
                ..TrainConfig::gpb()
            };
            let run = train_population(&prep, &Scope::Global, &cfg).unwrap();
            serde_json::to_string_pretty(&run.evaluation).unwrap()
        })
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    verdict(
        a == b && a == c,
        format!("{} bytes of metrics JSON; repeat identical: {}; 1 vs 4 threads identical: {}", a.len(), a == b, a == c),
    )
}

// 11 -----------------------------------------------------------------------

fn c11_real_data() -> Outcome {
    let Ok(dir) = std::env::var("GLYCONET_DIADATA_DIR") else {
        return Outcome::Skip("GLYCONET_DIADATA_DIR not set".into());
    };
    let dir = Path::new(&dir);
    let result = (|| -> glyconet::Result<(f64, usize)> {
        let series = ingest_glucose(&dir.join("glucose.csv"), 5)?;
        let subjects = ingest_subjects(&dir.join("subjects.csv"))?;
        let (cleaned, _) = preprocess_dataset(&Dataset::new("raw", 5, subjects, series), 5)?;
        let labeled = label_dataset(&cleaned, LabelScheme::Classes(ClassSetName::SetII))?;
        let dist = class_distribution(labeled.labels.as_ref().unwrap().iter().map(Vec::as_slice));
        let classed: u64 = (0..4).map(|c| dist.get(PointLabel::Class(c))).sum();
        let frac = dist.get(PointLabel::Class(0)) as f64 / classed.max(1) as f64;
        let prep = Prepared::from_dataset(&labeled, 30, 10, &Scaler::default())?;
        let run = train_population(&prep, &Scope::Global, &TrainConfig::gpb())?;
        let out = tempfile::tempdir().map_err(|e| glyconet::Error::Internal(e.to_string()))?;
        run.evaluation.write(out.path())?;
        Ok((frac, run.evaluation.per_group.len()))
    })();
    match result {
        Ok((frac, groups)) => {
            let target = 5.9 / 18.0;
            verdict(
                (frac - target).abs() <= 0.5 * target,
                format!("class-0 fraction {frac:.3} (target {target:.3} ± 50%), {groups} age-group reports"),
            )
        }
        Err(e) => Outcome::Fail(format!("pipeline failed: {e}")),
    }
}

fn main() -> ExitCode {
    let checks: Vec<(u32, &str, Check)> = vec![
        (1, "full-corpus reproduction", c1_scope_note),
        (2, "gradient check", c2_gradients),
        (3, "focal loss reductions", c3_focal),
        (4, "labeling oracle", c4_labeling),
        (5, "imputation", c5_imputation),
        (6, "tukey hsd", c6_tukey),
        (7, "windowing arithmetic", c7_windowing),
        (8, "learnability", c8_learnability),
        (9, "scope counterexample", c9_counterexample),
        (10, "determinism", c10_determinism),
        (11, "real data", c11_real_data),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut results = BTreeMap::new();
    for (n, name, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let (tag, detail) = match &outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => ("FAIL", d),
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {n:>2} [{name}]: {tag} ({:.1}s) {detail}", start.elapsed().as_secs_f64());
        results.insert(n, tag);
    }
    let failed: Vec<u32> = results.iter().filter(|(_, t)| **t == "FAIL").map(|(n, _)| *n).collect();
    println!(
        "acceptance: {} passed, {} failed, {} skipped",
        results.values().filter(|t| **t == "PASS").count(),
        failed.len(),
        results.values().filter(|t| **t == "SKIP").count()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
