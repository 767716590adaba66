//! Training protocols: global (GPB) and age-segmented (ASPB) population
//! models, per-subject fine-tuning, the ablation grid and scope comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use glyconet_nn::{Adam, AdamConfig, Architecture, FcnModel, FocalLossConfig, Matrix, Mode, Tensor3};

use crate::artifacts::{write_file, write_json, Dataset};
use crate::domain::{AgeGroup, ClassSetName, Sex, Subject, WindowSample};
use crate::error::{Error, Result};
use crate::labeling::{label_dataset, LabelScheme};
use crate::metrics::{evaluate, MacroMetrics, MetricsReport};
use crate::preprocess::resample_to_grid;
use crate::windowing::{dataset_windows, select_test_subjects, split_boundaries, Scaler, SplitPlan};
use crate::PIPELINE_VERSION;

pub const ABLATION_SEEDS: [u64; 3] = [48, 0, 1234];
pub const FINAL_SEED: u64 = 48;
pub const ABLATION_FRACTION: f64 = 0.1;
pub const ABLATION_TRAIN_SHARE: f64 = 0.7;
const EVAL_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// α = 1 for every class.
    Default,
    /// α_c = N / (C · N_c) from the training-scope label counts.
    Balanced,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(LossMode::Default),
            "balanced" | "weighted" => Ok(LossMode::Balanced),
            other => Err(Error::Config(format!("unknown loss mode '{other}' (default, balanced)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub loss: LossMode,
    pub gamma: f64,
    pub architecture: Architecture,
}

impl TrainConfig {
    pub fn ablation(seed: u64) -> Self {
        Self {
            batch_size: 128,
            epochs: 20,
            seed,
            lr: 1e-3,
            loss: LossMode::Balanced,
            gamma: 2.0,
            architecture: Architecture::default(),
        }
    }

    pub fn gpb() -> Self {
        Self {
            batch_size: 512,
            epochs: 100,
            ..Self::ablation(FINAL_SEED)
        }
    }

    pub fn aspb() -> Self {
        Self {
            batch_size: 264,
            ..Self::gpb()
        }
    }

    pub fn finetune() -> Self {
        Self {
            epochs: 5,
            lr: 1e-4,
            ..Self::gpb()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("learning rate and gamma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scope {
    Global,
    AgeGroup(AgeGroup),
    Finetune(String),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::AgeGroup(g) => write!(f, "age:{g}"),
            Scope::Finetune(s) => write!(f, "finetune:{s}"),
        }
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "global" {
            return Ok(Scope::Global);
        }
        if let Some(g) = s.strip_prefix("age:") {
            return Ok(Scope::AgeGroup(g.parse()?));
        }
        if let Some(id) = s.strip_prefix("finetune:") {
            return Ok(Scope::Finetune(id.to_string()));
        }
        Err(Error::Config(format!("unknown scope '{s}' (global, age:<group>, finetune:<subject>)")))
    }
}

/// Windows with a model target under `scheme`, plus the subject split.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub scheme: LabelScheme,
    pub isl_minutes: u32,
    pub rate: u32,
    /// Sorted by subject id, then end time.
    pub windows: Vec<WindowSample>,
    pub plan: SplitPlan,
}

impl Prepared {
    pub fn new(scheme: LabelScheme, isl_minutes: u32, rate: u32, windows: Vec<WindowSample>, plan: SplitPlan) -> Self {
        let mut windows: Vec<WindowSample> = windows.into_iter().filter(|w| scheme.target(w.label).is_some()).collect();
        windows.sort_by(|a, b| a.subject_id.cmp(&b.subject_id).then(a.end_time.cmp(&b.end_time)));
        let mut prep = Self {
            scheme,
            isl_minutes,
            rate,
            windows,
            plan,
        };
        let mut plan = prep.plan.clone();
        plan.set_boundaries(|id| prep.subject_windows(id), isl_minutes);
        prep.plan = plan;
        prep
    }

    /// Windows of a labeled dataset, with the `test_per_group` subjects of
    /// each age group holding the most datapoints set aside for testing.
    pub fn from_dataset(labeled: &Dataset, isl_minutes: u32, test_per_group: usize, scaler: &Scaler) -> Result<Self> {
        let scheme = labeled
            .label_scheme
            .ok_or_else(|| Error::Invalid("dataset has no labels; run the label stage first".into()))?;
        let windows = dataset_windows(labeled, isl_minutes, scaler)?;
        let sizes: Vec<(Subject, usize)> = labeled
            .series
            .iter()
            .map(|s| {
                let subject = labeled.subject(&s.subject_id).cloned().unwrap_or_else(|| Subject::new(s.subject_id.clone(), None, Sex::Unknown));
                (subject, s.observed_count())
            })
            .collect();
        let plan = select_test_subjects(&sizes, test_per_group);
        Ok(Self::new(scheme, isl_minutes, labeled.rate, windows, plan))
    }

    pub fn classes(&self) -> usize {
        self.scheme.num_classes()
    }

    pub fn subject_windows(&self, id: &str) -> &[WindowSample] {
        let start = self.windows.partition_point(|w| w.subject_id.as_str() < id);
        let end = self.windows.partition_point(|w| w.subject_id.as_str() <= id);
        &self.windows[start..end]
    }

    /// Personal train and test windows of a test subject.
    pub fn personal_split(&self, id: &str) -> Option<(&[WindowSample], &[WindowSample])> {
        let w = self.subject_windows(id);
        let b = split_boundaries(w, self.isl_minutes)?;
        Some((&w[..b.train_end], &w[b.test_start..]))
    }

    pub fn windows_of(&self, ids: &BTreeSet<&str>) -> Vec<&WindowSample> {
        self.windows.iter().filter(|w| ids.contains(w.subject_id.as_str())).collect()
    }

    /// Test subjects evaluated for a scope, sorted.
    pub fn test_subjects(&self, scope: &Scope) -> Vec<String> {
        match scope {
            Scope::Global => self.plan.all_test().into_iter().map(String::from).collect(),
            Scope::AgeGroup(g) => self.plan.test_subjects.get(g).cloned().unwrap_or_default(),
            Scope::Finetune(id) => vec![id.clone()],
        }
    }

    fn train_subjects(&self, scope: &Scope) -> BTreeSet<&str> {
        match scope {
            Scope::Global => self.plan.all_train(),
            Scope::AgeGroup(g) => self.plan.train_subjects.get(g).into_iter().flatten().map(String::as_str).collect(),
            Scope::Finetune(_) => BTreeSet::new(),
        }
    }
}

fn to_tensor(samples: &[&WindowSample]) -> Result<Tensor3> {
    let len = samples.first().map_or(0, |s| s.features.len());
    let data: Vec<f64> = samples.iter().flat_map(|s| s.features.iter().copied()).collect();
    Ok(Tensor3::from_vec(samples.len(), 1, len, data)?)
}

fn targets(samples: &[&WindowSample], scheme: LabelScheme) -> Result<Vec<usize>> {
    samples
        .iter()
        .map(|s| {
            scheme
                .target(s.label)
                .ok_or_else(|| Error::Internal(format!("window of {} has no target", s.subject_id)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

fn loss_config(cfg: &TrainConfig, labels: &[usize], classes: usize) -> FocalLossConfig {
    match cfg.loss {
        LossMode::Default => FocalLossConfig::uniform(classes, cfg.gamma),
        LossMode::Balanced => {
            let mut counts = vec![0usize; classes];
            for &l in labels {
                counts[l] += 1;
            }
            FocalLossConfig::balanced(&counts, cfg.gamma)
        }
    }
}

/// Mini-batch training with per-epoch shuffling. Starts from `init` when
/// given (fine-tuning), otherwise from a fresh model seeded by `cfg.seed`.
pub fn train_model(
    init: Option<FcnModel>,
    samples: &[&WindowSample],
    scheme: LabelScheme,
    cfg: &TrainConfig,
) -> Result<(FcnModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let classes = scheme.num_classes();
    if samples.is_empty() {
        return Err(Error::EmptyScope("no training windows".into()));
    }
    let len = samples[0].features.len();
    let mut model = match init {
        Some(m) => m,
        None => FcnModel::new(&cfg.architecture, len, classes, cfg.seed)?,
    };
    let labels = targets(samples, scheme)?;
    let loss = loss_config(cfg, &labels, classes);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &model.parameter_sizes());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| samples[i]).collect();
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let x = to_tensor(&batch)?;
            let cache = model.forward_cached(&x, Mode::Train)?;
            let (l, grads) = model.backward(&cache, &y, &loss)?;
            opt.step(model.parameters_mut(), &grads)
                .map_err(|e| Error::Internal(format!("epoch {epoch}: {e}")))?;
            model.apply_bn_stats(&cache.bn_stats);
            total += l * chunk.len() as f64;
        }
        let mean_loss = total / samples.len() as f64;
        log::debug!("epoch {epoch}: loss {mean_loss:.6}");
        log.push(EpochLog { epoch, mean_loss });
    }
    model.meta.epochs_trained += cfg.epochs;
    Ok((model, log))
}

/// Class probabilities in evaluation mode.
pub fn predict(model: &FcnModel, samples: &[&WindowSample]) -> Result<Matrix> {
    let classes = model.meta.classes;
    let mut data = Vec::with_capacity(samples.len() * classes);
    for chunk in samples.chunks(EVAL_CHUNK) {
        let p = model.forward(&to_tensor(chunk)?, Mode::Eval)?;
        data.extend_from_slice(&p.data);
    }
    Ok(Matrix::from_vec(samples.len(), classes, data)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEval {
    pub age_group: AgeGroup,
    pub report: MetricsReport,
    #[serde(skip)]
    truth: Vec<usize>,
    #[serde(skip)]
    probs: Vec<f64>,
}

/// Evaluation of one model scope on personal test portions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scheme: LabelScheme,
    pub overall: MetricsReport,
    pub per_group: BTreeMap<AgeGroup, MetricsReport>,
    pub per_subject: BTreeMap<String, SubjectEval>,
}

fn pooled(classes: usize, parts: &[&SubjectEval]) -> Result<MetricsReport> {
    let truth: Vec<usize> = parts.iter().flat_map(|p| p.truth.iter().copied()).collect();
    let probs: Vec<f64> = parts.iter().flat_map(|p| p.probs.iter().copied()).collect();
    evaluate(&truth, &Matrix::from_vec(truth.len(), classes, probs)?)
}

impl Evaluation {
    fn from_subjects(scheme: LabelScheme, per_subject: BTreeMap<String, SubjectEval>) -> Result<Self> {
        let classes = scheme.num_classes();
        let all: Vec<&SubjectEval> = per_subject.values().collect();
        let overall = pooled(classes, &all)?;
        let mut per_group = BTreeMap::new();
        let groups: BTreeSet<AgeGroup> = per_subject.values().map(|s| s.age_group).collect();
        for g in groups {
            let parts: Vec<&SubjectEval> = per_subject.values().filter(|s| s.age_group == g).collect();
            per_group.insert(g, pooled(classes, &parts)?);
        }
        Ok(Self {
            scheme,
            overall,
            per_group,
            per_subject,
        })
    }

    /// Joins evaluations of disjoint subject sets (e.g. the ASPB models).
    pub fn merge(parts: Vec<Evaluation>) -> Result<Self> {
        let scheme = parts
            .first()
            .map(|p| p.scheme)
            .ok_or_else(|| Error::Invalid("nothing to merge".into()))?;
        let mut per_subject = BTreeMap::new();
        for p in parts {
            for (id, s) in p.per_subject {
                if per_subject.insert(id.clone(), s).is_some() {
                    return Err(Error::Invalid(format!("subject {id} evaluated twice")));
                }
            }
        }
        Self::from_subjects(scheme, per_subject)
    }

    pub fn test_subjects(&self) -> BTreeSet<&str> {
        self.per_subject.keys().map(String::as_str).collect()
    }

    /// Table in the per-age-group layout: one row per group plus overall.
    pub fn per_group_csv(&self) -> String {
        let mut s = String::from("age_group,subjects,samples,recall,precision,f1,pr_auc\n");
        let mut row = |name: &str, subjects: usize, r: &MetricsReport| {
            let m = &r.macro_avg;
            s.push_str(&format!("{name},{subjects},{},{},{},{},{}\n", r.samples, m.recall, m.precision, m.f1, m.pr_auc));
        };
        for (g, r) in &self.per_group {
            let n = self.per_subject.values().filter(|s| s.age_group == *g).count();
            row(g.label(), n, r);
        }
        row("all", self.per_subject.len(), &self.overall);
        s
    }

    pub fn per_subject_csv(&self) -> String {
        let mut s = String::from("subject_id,age_group,samples,recall,precision,f1,pr_auc\n");
        for (id, e) in &self.per_subject {
            let m = &e.report.macro_avg;
            s.push_str(&format!("{id},{},{},{},{},{},{}\n", e.age_group, e.report.samples, m.recall, m.precision, m.f1, m.pr_auc));
        }
        s
    }

    /// `metrics.json` (everything), `metrics.csv`, `confusion.csv`,
    /// `per_group.csv`, `per_subject.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("metrics.json"), self)?;
        write_file(&dir.join("metrics.csv"), self.overall.to_csv().as_bytes())?;
        write_file(&dir.join("confusion.csv"), self.overall.confusion_csv().as_bytes())?;
        write_file(&dir.join("per_group.csv"), self.per_group_csv().as_bytes())?;
        write_file(&dir.join("per_subject.csv"), self.per_subject_csv().as_bytes())
    }
}

/// Evaluates `model` on the personal test portion of each subject. Subjects
/// with fewer than ten target windows are skipped.
pub fn evaluate_subjects(model: &FcnModel, prep: &Prepared, subjects: &[String]) -> Result<Evaluation> {
    let mut per_subject = BTreeMap::new();
    for id in subjects {
        let Some((_, test)) = prep.personal_split(id) else {
            log::warn!("{id}: too few windows for a personal test portion, skipped");
            continue;
        };
        per_subject.insert(id.clone(), subject_eval(model, prep.scheme, test)?);
    }
    if per_subject.is_empty() {
        return Err(Error::EmptyScope("no test subject has enough windows".into()));
    }
    Evaluation::from_subjects(prep.scheme, per_subject)
}

fn subject_eval(model: &FcnModel, scheme: LabelScheme, test: &[WindowSample]) -> Result<SubjectEval> {
    let refs: Vec<&WindowSample> = test.iter().collect();
    let truth = targets(&refs, scheme)?;
    let probs = predict(model, &refs)?;
    Ok(SubjectEval {
        age_group: test[0].age_group,
        report: evaluate(&truth, &probs)?,
        truth,
        probs: probs.data,
    })
}

/// Fails if any training window belongs to a test subject.
pub fn audit_no_leak(train: &[&WindowSample], plan: &SplitPlan) -> Result<()> {
    let test = plan.all_test();
    match train.iter().find(|w| test.contains(w.subject_id.as_str())) {
        Some(w) => Err(Error::Internal(format!("test subject {} leaked into training", w.subject_id))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct PopulationRun {
    pub scope: Scope,
    pub model: FcnModel,
    pub evaluation: Evaluation,
    pub train_subjects: Vec<String>,
    pub train_windows: usize,
    pub log: Vec<EpochLog>,
}

/// Trains a population model for `Global` or `AgeGroup` scope and
/// evaluates it on the scope's test subjects.
pub fn train_population(prep: &Prepared, scope: &Scope, cfg: &TrainConfig) -> Result<PopulationRun> {
    if matches!(scope, Scope::Finetune(_)) {
        return Err(Error::Config("population training needs a global or age-group scope".into()));
    }
    let ids = prep.train_subjects(scope);
    let train = prep.windows_of(&ids);
    if train.is_empty() {
        return Err(Error::EmptyScope(format!("scope {scope} has no training windows")));
    }
    audit_no_leak(&train, &prep.plan)?;
    log::info!("training {scope}: {} windows from {} subjects", train.len(), ids.len());
    let (model, log) = train_model(None, &train, prep.scheme, cfg)?;
    let evaluation = evaluate_subjects(&model, prep, &prep.test_subjects(scope))?;
    Ok(PopulationRun {
        scope: scope.clone(),
        model,
        evaluation,
        train_subjects: ids.into_iter().map(String::from).collect(),
        train_windows: train.len(),
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRun {
    pub base: Evaluation,
    pub tuned: Evaluation,
    pub skipped: Vec<String>,
    #[serde(skip)]
    pub models: BTreeMap<String, FcnModel>,
}

/// Fine-tunes a copy of `base` on each subject's personal training portion
/// (all layers, `cfg.lr`) and evaluates base and tuned models on the same
/// personal test portion.
pub fn finetune(base: &FcnModel, prep: &Prepared, subjects: &[String], cfg: &TrainConfig) -> Result<FinetuneRun> {
    use rayon::prelude::*;
    let results: Vec<Option<(String, SubjectEval, SubjectEval, FcnModel)>> = subjects
        .par_iter()
        .map(|id| {
            let Some((train, test)) = prep.personal_split(id) else {
                log::warn!("{id}: too few windows, not fine-tuned");
                return Ok(None);
            };
            if train.is_empty() {
                log::warn!("{id}: empty personal training portion, skipped");
                return Ok(None);
            }
            let refs: Vec<&WindowSample> = train.iter().collect();
            let (tuned, _) = train_model(Some(base.clone()), &refs, prep.scheme, cfg)?;
            let before = subject_eval(base, prep.scheme, test)?;
            let after = subject_eval(&tuned, prep.scheme, test)?;
            Ok(Some((id.clone(), before, after, tuned)))
        })
        .collect::<Result<_>>()?;
    let mut base_eval = BTreeMap::new();
    let mut tuned_eval = BTreeMap::new();
    let mut models = BTreeMap::new();
    let mut skipped = Vec::new();
    for (id, r) in subjects.iter().zip(results) {
        match r {
            Some((id, b, t, m)) => {
                base_eval.insert(id.clone(), b);
                tuned_eval.insert(id.clone(), t);
                models.insert(id, m);
            }
            None => skipped.push(id.clone()),
        }
    }
    if base_eval.is_empty() {
        return Err(Error::EmptyScope("no subject could be fine-tuned".into()));
    }
    Ok(FinetuneRun {
        base: Evaluation::from_subjects(prep.scheme, base_eval)?,
        tuned: Evaluation::from_subjects(prep.scheme, tuned_eval)?,
        skipped,
        models,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub age_group: AgeGroup,
    pub gpb: MacroMetrics,
    pub aspb: MacroMetrics,
    pub delta_recall: f64,
    pub delta_precision: f64,
    pub delta_f1: f64,
    pub delta_pr_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extremes {
    pub model: String,
    pub age_group: AgeGroup,
    pub best_subject: String,
    pub best_f1: f64,
    pub worst_subject: String,
    pub worst_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub extremes: Vec<Extremes>,
}

fn extremes(name: &str, e: &Evaluation) -> Vec<Extremes> {
    let mut out = Vec::new();
    for g in e.per_group.keys() {
        let mut subs: Vec<(&String, f64)> =
            e.per_subject.iter().filter(|(_, s)| s.age_group == *g).map(|(id, s)| (id, s.report.macro_avg.f1)).collect();
        subs.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let (Some(best), Some(worst)) = (subs.first(), subs.last()) {
            out.push(Extremes {
                model: name.to_string(),
                age_group: *g,
                best_subject: best.0.clone(),
                best_f1: best.1,
                worst_subject: worst.0.clone(),
                worst_f1: worst.1,
            });
        }
    }
    out
}

/// Side-by-side per-group macro metrics with `aspb − gpb` deltas. Both
/// evaluations must cover the same test subjects.
pub fn compare_scopes(gpb: &Evaluation, aspb: &Evaluation) -> Result<Comparison> {
    if gpb.test_subjects() != aspb.test_subjects() {
        let a: Vec<_> = gpb.test_subjects().symmetric_difference(&aspb.test_subjects()).map(|s| s.to_string()).collect();
        return Err(Error::Invalid(format!("test sets differ in {a:?}")));
    }
    let rows = gpb
        .per_group
        .iter()
        .filter_map(|(g, r)| aspb.per_group.get(g).map(|a| (g, &r.macro_avg, &a.macro_avg)))
        .map(|(g, p, a)| ComparisonRow {
            age_group: *g,
            gpb: p.clone(),
            aspb: a.clone(),
            delta_recall: a.recall - p.recall,
            delta_precision: a.precision - p.precision,
            delta_f1: a.f1 - p.f1,
            delta_pr_auc: a.pr_auc - p.pr_auc,
        })
        .collect();
    let mut ext = extremes("GPB", gpb);
    ext.extend(extremes("ASPB", aspb));
    Ok(Comparison { rows, extremes: ext })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "age_group,gpb_recall,gpb_precision,gpb_f1,gpb_pr_auc,aspb_recall,aspb_precision,aspb_f1,aspb_pr_auc,delta_recall,delta_precision,delta_f1,delta_pr_auc\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.age_group,
                r.gpb.recall,
                r.gpb.precision,
                r.gpb.f1,
                r.gpb.pr_auc,
                r.aspb.recall,
                r.aspb.precision,
                r.aspb.f1,
                r.aspb.pr_auc,
                r.delta_recall,
                r.delta_precision,
                r.delta_f1,
                r.delta_pr_auc
            ));
        }
        s
    }
}

/// Ablation subjects: a seeded `fraction` of each group's training
/// subjects (at least one), then a subject-level 70:30 split.
pub fn ablation_subjects(plan: &SplitPlan, fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut chosen = Vec::new();
    for members in plan.train_subjects.values() {
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let k = ((m.len() as f64 * fraction).floor() as usize).max(1).min(m.len());
        chosen.extend(m.into_iter().take(k));
    }
    chosen.shuffle(&mut rng);
    let n_train = ((chosen.len() as f64 * ABLATION_TRAIN_SHARE).floor() as usize).clamp(1.min(chosen.len()), chosen.len().saturating_sub(1).max(1));
    let mut test = chosen.split_off(n_train.min(chosen.len()));
    chosen.sort();
    test.sort();
    (chosen, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub isl_minutes: u32,
    pub rate: u32,
    pub scheme: LabelScheme,
    pub loss: LossMode,
}

impl AblationCell {
    pub fn new(name: &str, isl_minutes: u32, rate: u32, set: ClassSetName, loss: LossMode) -> Self {
        Self {
            name: name.to_string(),
            isl_minutes,
            rate,
            scheme: LabelScheme::Classes(set),
            loss,
        }
    }
}

/// The published ablation sequence: loss weighting on set I, the three
/// class sets, longer input spans on set II, then the 15-minute grid.
pub fn default_ablation_grid() -> Vec<AblationCell> {
    use ClassSetName::*;
    let mut cells = vec![
        AblationCell::new("FL default", 30, 5, SetI, LossMode::Default),
        AblationCell::new("Class I + FL + w", 30, 5, SetI, LossMode::Balanced),
        AblationCell::new("Class II + FL + w", 30, 5, SetII, LossMode::Balanced),
        AblationCell::new("Class III + FL + w", 30, 5, SetIII, LossMode::Balanced),
    ];
    for isl in [45, 60, 90, 120] {
        cells.push(AblationCell::new(&format!("ISL of {isl} min"), isl, 5, SetII, LossMode::Balanced));
    }
    for (roman, isl) in ["I", "II", "III", "IV", "V"].iter().zip([30, 45, 60, 90, 120]) {
        cells.push(AblationCell::new(&format!("15 min sampling {roman}"), isl, 15, SetII, LossMode::Balanced));
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MacroMetrics>,
    /// Mean over seeds; `None` when the cell failed.
    pub mean: Option<MacroMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sampling_seed: u64,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub rows: Vec<AblationRow>,
}

fn mean_macro(m: &[MacroMetrics]) -> MacroMetrics {
    let n = m.len() as f64;
    MacroMetrics {
        recall: m.iter().map(|x| x.recall).sum::<f64>() / n,
        precision: m.iter().map(|x| x.precision).sum::<f64>() / n,
        f1: m.iter().map(|x| x.f1).sum::<f64>() / n,
        pr_auc: m.iter().map(|x| x.pr_auc).sum::<f64>() / n,
        classes_averaged: m.iter().map(|x| x.classes_averaged).max().unwrap_or(0),
    }
}

fn cell_windows(cleaned: &Dataset, cell: &AblationCell) -> Result<Vec<WindowSample>> {
    let ds = if cell.rate == cleaned.rate {
        cleaned.clone()
    } else {
        if cleaned.rate != 5 {
            return Err(Error::Config(format!("cannot derive a {}-minute grid from {} minutes", cell.rate, cleaned.rate)));
        }
        let series = cleaned.series.iter().map(|s| resample_to_grid(s, cell.rate)).collect::<Result<Vec<_>>>()?;
        Dataset::new("cleaned", cell.rate, cleaned.subjects.clone(), series)
    };
    let labeled = label_dataset(&ds, cell.scheme)?;
    dataset_windows(&labeled, cell.isl_minutes, &Scaler::default())
}

fn run_cell(cleaned: &Dataset, cell: &AblationCell, train_ids: &BTreeSet<&str>, test_ids: &BTreeSet<&str>, seeds: &[u64], base: &TrainConfig) -> Result<Vec<MacroMetrics>> {
    let windows = cell_windows(cleaned, cell)?;
    let usable: Vec<&WindowSample> = windows.iter().filter(|w| cell.scheme.target(w.label).is_some()).collect();
    let train: Vec<&WindowSample> = usable.iter().copied().filter(|w| train_ids.contains(w.subject_id.as_str())).collect();
    let test: Vec<&WindowSample> = usable.iter().copied().filter(|w| test_ids.contains(w.subject_id.as_str())).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::EmptyScope(format!("cell {}: no training or test windows", cell.name)));
    }
    let truth = targets(&test, cell.scheme)?;
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, loss: cell.loss, ..base.clone() };
            let (model, _) = train_model(None, &train, cell.scheme, &cfg)?;
            Ok(evaluate(&truth, &predict(&model, &test)?)?.macro_avg)
        })
        .collect()
}

/// Runs every cell over `seeds` on the ablation subset of `cleaned`
/// (a preprocessed 5-minute dataset). Failed cells are recorded and the
/// grid continues.
pub fn run_ablation(
    cleaned: &Dataset,
    plan: &SplitPlan,
    cells: &[AblationCell],
    seeds: &[u64],
    sampling_seed: u64,
    fraction: f64,
    base: &TrainConfig,
) -> Result<AblationTable> {
    let (train_subjects, test_subjects) = ablation_subjects(plan, fraction, sampling_seed);
    let train_ids: BTreeSet<&str> = train_subjects.iter().map(String::as_str).collect();
    let test_ids: BTreeSet<&str> = test_subjects.iter().map(String::as_str).collect();
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        log::info!("ablation cell {}", cell.name);
        let row = match run_cell(cleaned, cell, &train_ids, &test_ids, seeds, base) {
            Ok(per_seed) => AblationRow {
                cell: cell.clone(),
                seeds: seeds.to_vec(),
                mean: Some(mean_macro(&per_seed)),
                per_seed,
                error: None,
            },
            Err(e) => {
                log::warn!("ablation cell {} failed: {e}", cell.name);
                AblationRow {
                    cell: cell.clone(),
                    seeds: seeds.to_vec(),
                    per_seed: Vec::new(),
                    mean: None,
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    Ok(AblationTable {
        sampling_seed,
        train_subjects,
        test_subjects,
        rows,
    })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("configuration,isl_minutes,rate,scheme,loss,recall,precision,f1,pr_auc,error\n");
        for r in &self.rows {
            let c = &r.cell;
            let m = r.mean.as_ref();
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{:?},{},{},{},{},{}\n",
                c.name,
                c.isl_minutes,
                c.rate,
                c.scheme,
                c.loss,
                f(m.map(|m| m.recall)),
                f(m.map(|m| m.precision)),
                f(m.map(|m| m.f1)),
                f(m.map(|m| m.pr_auc)),
                r.error.as_deref().unwrap_or("").replace(',', ";")
            ));
        }
        s
    }
}

/// sha256 over the canonical bytes of a window list.
pub fn windows_fingerprint(windows: &[&WindowSample]) -> String {
    let mut h = Sha256::new();
    for w in windows {
        h.update(w.subject_id.as_bytes());
        h.update([0]);
        h.update(w.end_time.to_le_bytes());
        h.update(w.label.token().as_bytes());
        h.update([0]);
        for f in &w.features {
            h.update(f.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Git-style blob hash (`sha256("blob <len>\0" ++ bytes)`).
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub pipeline_version: String,
    pub kind: String,
    pub scope: String,
    pub scheme: LabelScheme,
    pub isl_minutes: u32,
    pub rate: u32,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_windows: usize,
    pub train_fingerprint: String,
    pub test_fingerprint: String,
    /// Hashes of input files by name.
    pub inputs: BTreeMap<String, String>,
    pub leak_audit_passed: bool,
    pub pr_auc_definition: String,
}

impl RunManifest {
    pub fn for_population(prep: &Prepared, run: &PopulationRun, cfg: &TrainConfig, inputs: BTreeMap<String, String>) -> Self {
        let train_ids: BTreeSet<&str> = run.train_subjects.iter().map(String::as_str).collect();
        let train = prep.windows_of(&train_ids);
        let test_ids: Vec<String> = run.evaluation.per_subject.keys().cloned().collect();
        let test: Vec<&WindowSample> = test_ids
            .iter()
            .filter_map(|id| prep.personal_split(id))
            .flat_map(|(_, t)| t.iter())
            .collect();
        Self {
            pipeline_version: PIPELINE_VERSION.to_string(),
            kind: "population".into(),
            scope: run.scope.to_string(),
            scheme: prep.scheme,
            isl_minutes: prep.isl_minutes,
            rate: prep.rate,
            config: cfg.clone(),
            seeds: vec![cfg.seed],
            train_subjects: run.train_subjects.clone(),
            test_subjects: test_ids,
            train_windows: run.train_windows,
            train_fingerprint: windows_fingerprint(&train),
            test_fingerprint: windows_fingerprint(&test),
            inputs,
            leak_audit_passed: audit_no_leak(&train, &prep.plan).is_ok(),
            pr_auc_definition: crate::metrics::PR_AUC_DEFINITION.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PointLabel;

    fn window(id: &str, t: i64, label: u8, v: f64, g: AgeGroup) -> WindowSample {
        WindowSample {
            subject_id: id.into(),
            end_time: t,
            features: vec![v; 7],
            label: PointLabel::Class(label),
            age_group: g,
        }
    }

    fn tiny_arch() -> Architecture {
        Architecture {
            channels: vec![4, 4, 4],
            kernels: vec![8, 5, 3],
        }
    }

    #[test]
    fn defaults_follow_the_protocol() {
        assert_eq!((TrainConfig::ablation(0).batch_size, TrainConfig::ablation(0).epochs), (128, 20));
        assert_eq!((TrainConfig::gpb().batch_size, TrainConfig::gpb().epochs, TrainConfig::gpb().seed), (512, 100, 48));
        assert_eq!(TrainConfig::aspb().batch_size, 264);
        assert_eq!((TrainConfig::finetune().epochs, TrainConfig::finetune().lr), (5, 1e-4));
    }

    #[test]
    fn scope_parsing() {
        assert_eq!("global".parse::<Scope>().unwrap(), Scope::Global);
        assert_eq!("age:14-20".parse::<Scope>().unwrap(), Scope::AgeGroup(AgeGroup::G14To20));
        assert_eq!("finetune:x".parse::<Scope>().unwrap(), Scope::Finetune("x".into()));
        assert!("age:99".parse::<Scope>().is_err());
        assert_eq!(Scope::AgeGroup(AgeGroup::G45Plus).to_string(), "age:45+");
    }

    #[test]
    fn leak_audit() {
        let mut plan = SplitPlan {
            test_per_group: 1,
            train_subjects: BTreeMap::new(),
            test_subjects: BTreeMap::new(),
            boundaries: BTreeMap::new(),
        };
        plan.test_subjects.insert(AgeGroup::G0To13, vec!["t".into()]);
        let ok = window("a", 0, 1, 0.5, AgeGroup::G0To13);
        let bad = window("t", 0, 1, 0.5, AgeGroup::G0To13);
        assert!(audit_no_leak(&[&ok], &plan).is_ok());
        assert!(matches!(audit_no_leak(&[&ok, &bad], &plan), Err(Error::Internal(_))));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ws: Vec<WindowSample> = (0..20).map(|i| window("a", i, (i % 4) as u8, 0.1 * (i % 4) as f64, AgeGroup::G0To13)).collect();
        let refs: Vec<&WindowSample> = ws.iter().collect();
        let cfg = TrainConfig {
            architecture: tiny_arch(),
            epochs: 0,
            ..TrainConfig::ablation(3)
        };
        let base = FcnModel::new(&tiny_arch(), 7, 4, 1).unwrap();
        let (m, log) = train_model(Some(base.clone()), &refs, LabelScheme::Classes(crate::ClassSetName::SetII), &cfg).unwrap();
        assert_eq!(m, base);
        assert!(log.is_empty());
    }

    #[test]
    fn ablation_subset_is_disjoint_and_seeded() {
        let mut plan = SplitPlan {
            test_per_group: 0,
            train_subjects: BTreeMap::new(),
            test_subjects: BTreeMap::new(),
            boundaries: BTreeMap::new(),
        };
        for g in AgeGroup::KNOWN {
            plan.train_subjects.insert(g, (0..30).map(|i| format!("{}_{i:02}", g.label())).collect());
        }
        let (a, b) = ablation_subjects(&plan, 0.1, 48);
        assert_eq!(a.len() + b.len(), 12);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|x| !b.contains(x)));
        assert_eq!(ablation_subjects(&plan, 0.1, 48), (a, b));
    }

    #[test]
    fn blob_hash_matches_git_layout() {
        // `printf 'hello\n' | git hash-object --stdin` with sha256 object format.
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}
