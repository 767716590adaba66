//! `glyconet`: the CGM hypoglycemia-onset pipeline as subcommands.
//!
//! Stage directories default to locations under `--data-dir`:
//! the raw artifact at the root, then `cleaned/`, `labeled/`, `split.json`
//! and `windows/`. Runs go to `<artifact-dir>/runs/<name>/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use glyconet::artifacts::{load_dataset, save_dataset, Dataset};
use glyconet::cohort_stats::{age_rows_csv, evaluate_split, split_csv, summary_per_age};
use glyconet::experiments::{
    blob_hash, compare_scopes, default_ablation_grid, evaluate_subjects, finetune, run_ablation, train_population, windows_fingerprint,
    Evaluation, LossMode, PopulationRun, Prepared, RunManifest, Scope, TrainConfig, ABLATION_FRACTION, ABLATION_SEEDS,
};
use glyconet::ingestion::{cohort_summary, ingest_glucose, ingest_subjects};
use glyconet::labeling::{class_distribution, label_dataset, LabelScheme};
use glyconet::nn::{load_model, save_model, FcnModel};
use glyconet::preprocess::{gaps_csv, preprocess_dataset};
use glyconet::synth::{generate_cohort, write_cohort, SynthConfig};
use glyconet::windowing::{dataset_windows, load_windows, save_windows, select_test_subjects, window_length, Scaler, SplitPlan, WindowsMeta};
use glyconet::{AgeGroup, ClassSetName, Subject, WindowSample, PIPELINE_VERSION};

/// Bad invocation or configuration; exits with status 1.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "glyconet", version, about = "Hypoglycemia-onset classification pipeline for CGM data")]
struct Cli {
    /// Artifact root; stage directories default to paths below it [default: glyconet-data]
    #[arg(long, env = "GLYCONET_DATA_DIR", global = true)]
    data_dir: Option<PathBuf>,
    /// Where `runs/` is written [default: the data dir]
    #[arg(long, global = true)]
    artifact_dir: Option<PathBuf>,
    /// JSON pipeline configuration; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream [default: 48, or the config value]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses all cores. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read glucose and subject CSVs into a raw artifact directory.
    Ingest(IngestArgs),
    /// Generate a synthetic cohort as a raw artifact plus episodes.csv.
    Synth(SynthArgs),
    /// Resample, remove outliers, clamp and impute; writes cleaned/ and gaps.csv.
    Preprocess(PreprocessArgs),
    /// Cohort statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Label every point by minutes before the next hypoglycemic reading.
    Label(LabelArgs),
    /// Choose test subjects per age group.
    Split(SplitArgs),
    /// Cut labeled series into normalized sliding windows.
    Windows(WindowsArgs),
    /// Train a population model (global, one age group, or all age groups).
    Train(TrainArgs),
    /// Fine-tune a trained model on each test subject's own data.
    Finetune(FinetuneArgs),
    /// Re-evaluate a trained model on its scope's test subjects.
    Evaluate(EvaluateArgs),
    /// Run the ablation grid on a subject subset.
    Ablate(AblateArgs),
    /// Per-age-group comparison of a global and an age-segmented run.
    Compare(CompareArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Glucose CSV with header subject_id,timestamp,glucose_mgdl.
    #[arg(long)]
    glucose: PathBuf,
    /// Subjects CSV with header subject_id,age_years,sex.
    #[arg(long)]
    subjects: Option<PathBuf>,
    /// Output directory [default: <data-dir>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory [default: <data-dir>]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Subjects in each known age group [default: 4]
    #[arg(long)]
    subjects_per_group: Option<usize>,
    /// Days per subject [default: 7]
    #[arg(long)]
    days: Option<f64>,
    /// No gaps, outliers or descent noise.
    #[arg(long)]
    clean: bool,
    /// Children follow a time-shifted descent (age-scope counterexample).
    #[arg(long)]
    counterexample: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Raw artifact directory [default: <data-dir>]
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory [default: <in>/cleaned]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sampling rate in minutes, 5 or 15 [default: 5]
    #[arg(long)]
    rate: Option<u32>,
}

#[derive(Subcommand)]
enum StatsCommand {
    /// Cohort summary as JSON, or per-age rows as CSV with --per-age.
    Summary {
        /// Write one CSV row per integer age.
        #[arg(long)]
        per_age: bool,
        /// Dataset directory [default: <data-dir>/cleaned]
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output file.
        out: PathBuf,
    },
    /// Tukey HSD over age bins; one CSV row per group pair.
    Tukey {
        /// Ascending bin edges in years.
        #[arg(long, value_delimiter = ',', default_value = "14,21,45")]
        edges: Vec<u32>,
        /// Dataset directory [default: <data-dir>/cleaned]
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Output file.
        out: PathBuf,
    },
}

#[derive(Args)]
struct LabelArgs {
    /// Class set I, II or III [default: II]
    #[arg(long)]
    class_set: Option<String>,
    /// Binary risk labels (≤ 120 min before onset) instead of classes.
    #[arg(long, conflicts_with = "class_set")]
    binary: bool,
    /// Cleaned dataset [default: <data-dir>/cleaned]
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory [default: <data-dir>/labeled]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Labeled dataset [default: <data-dir>/labeled]
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Test subjects per age group [default: 10]
    #[arg(long)]
    test_per_group: Option<usize>,
    /// Output file [default: <data-dir>/split.json]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WindowsArgs {
    /// Input span in minutes: 30, 45, 60, 90 or 120 [default: 30]
    #[arg(long)]
    isl: Option<u32>,
    /// Labeled dataset [default: <data-dir>/labeled]
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output directory [default: <data-dir>/windows]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TrainFlags {
    /// Epochs [default: 100; fine-tune 5]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 512 global, 264 per age group]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 1e-3; fine-tune 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Focal loss class weights: default or balanced [default: balanced]
    #[arg(long)]
    loss: Option<String>,
    /// Windows directory [default: <data-dir>/windows]
    #[arg(long)]
    windows: Option<PathBuf>,
    /// Split file [default: <data-dir>/split.json]
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// global, age:<0-13|14-20|21-44|45+>, or aspb for every age group [default: global]
    #[arg(long)]
    scope: Option<String>,
    /// Run name [default: derived from the scope]
    #[arg(long)]
    name: Option<String>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Run directory holding model.json.
    #[arg(long)]
    base: PathBuf,
    /// Subject to fine-tune; repeatable [default: the run's test subjects]
    #[arg(long)]
    subject: Vec<String>,
    /// Output directory [default: <base>/finetune]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Run directory holding model.json and run_manifest.json.
    #[arg(long)]
    run: PathBuf,
    /// Output directory [default: <run>/evaluation]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Windows directory [default: <data-dir>/windows]
    #[arg(long)]
    windows: Option<PathBuf>,
    /// Split file [default: <data-dir>/split.json]
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Cleaned 5-minute dataset [default: <data-dir>/cleaned]
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Split file [default: <data-dir>/split.json]
    #[arg(long)]
    split: Option<PathBuf>,
    /// Training seeds [default: 48,0,1234]
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Fraction of each group's training subjects [default: 0.1]
    #[arg(long)]
    fraction: Option<f64>,
    /// Only run the named cells; repeatable [default: the full grid]
    #[arg(long)]
    cell: Vec<String>,
    /// Epochs [default: 20]
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size [default: 128]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run name [default: ablation]
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Global run directory [default: <artifact-dir>/runs/global]
    #[arg(long)]
    gpb: Option<PathBuf>,
    /// Age-segmented run directory [default: <artifact-dir>/runs/aspb]
    #[arg(long)]
    aspb: Option<PathBuf>,
    /// Output directory [default: <artifact-dir>/runs/compare]
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Contents of `--config`. Every field is optional in the file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    data_dir: PathBuf,
    artifact_dir: Option<PathBuf>,
    class_set: String,
    binary: bool,
    isl_minutes: u32,
    rate: u32,
    scope: String,
    test_per_group: usize,
    seed: u64,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    lr: Option<f64>,
    loss: Option<LossMode>,
    gamma: f64,
    ablation_seeds: Vec<u64>,
    ablation_fraction: f64,
    synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("glyconet-data"),
            artifact_dir: None,
            class_set: "II".into(),
            binary: false,
            isl_minutes: 30,
            rate: 5,
            scope: "global".into(),
            test_per_group: glyconet::windowing::DEFAULT_TEST_PER_GROUP,
            seed: glyconet::experiments::FINAL_SEED,
            batch_size: None,
            epochs: None,
            lr: None,
            loss: None,
            gamma: 2.0,
            ablation_seeds: ABLATION_SEEDS.to_vec(),
            ablation_fraction: ABLATION_FRACTION,
            synth: SynthConfig::default(),
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    root: PathBuf,
    runs: PathBuf,
    seed: u64,
}

impl Ctx {
    fn path(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join(default))
    }

    fn run_path(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.runs.join(name))
    }

    fn windows_dir(&self, flags: &Option<PathBuf>) -> PathBuf {
        self.path(flags, "windows")
    }

    fn split_file(&self, flags: &Option<PathBuf>) -> PathBuf {
        self.path(flags, "split.json")
    }

    /// File values over the preset, flags over both.
    fn train_config(&self, preset: TrainConfig, flags: &TrainFlags) -> Result<TrainConfig> {
        let c = &self.cfg;
        let loss = match &flags.loss {
            Some(s) => Some(s.parse::<LossMode>().map_err(|e| usage(e.to_string()))?),
            None => c.loss,
        };
        let cfg = TrainConfig {
            batch_size: flags.batch_size.or(c.batch_size).unwrap_or(preset.batch_size),
            epochs: flags.epochs.or(c.epochs).unwrap_or(preset.epochs),
            seed: self.seed,
            lr: flags.lr.or(c.lr).unwrap_or(preset.lr),
            loss: loss.unwrap_or(preset.loss),
            gamma: c.gamma,
            architecture: preset.architecture,
        };
        cfg.validate().map_err(|e| usage(e.to_string()))?;
        Ok(cfg)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| glyconet::Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| {
        glyconet::Error::Data {
            path: path.to_path_buf(),
            message: e.to_string(),
        }
        .into()
    })
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| glyconet::Error::Data {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(blob_hash(&bytes))
}

fn class_set_arg(s: &str) -> Result<ClassSetName> {
    s.parse::<ClassSetName>().map_err(|e| usage(e.to_string()))
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let series = ingest_glucose(&a.glucose, glyconet::domain::BASE_RATE_MINUTES)?;
    let subjects: Vec<Subject> = match &a.subjects {
        Some(p) => ingest_subjects(p)?,
        None => Vec::new(),
    };
    let out = a.out.clone().unwrap_or_else(|| ctx.root.clone());
    let ds = Dataset::new("raw", glyconet::domain::BASE_RATE_MINUTES, subjects, series);
    save_dataset(&out, &ds, None)?;
    write_json(&out.join("cohort_summary.json"), &cohort_summary(&ds.series, &ds.subjects))?;
    log::info!("ingested {} subjects into {}", ds.series.len(), out.display());
    Ok(())
}

fn synth(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let mut cfg = ctx.cfg.synth.clone();
    cfg.seed = ctx.seed;
    if let Some(n) = a.subjects_per_group {
        cfg = cfg.with_subjects_per_group(n);
    }
    if let Some(d) = a.days {
        cfg.days = d;
    }
    if a.clean {
        cfg = cfg.clean();
    }
    if a.counterexample {
        cfg = cfg.counterexample();
    }
    let cohort = generate_cohort(&cfg).map_err(|e| usage(e.to_string()))?;
    let out = a.out.clone().unwrap_or_else(|| ctx.root.clone());
    write_cohort(&out, &cohort)?;
    write_json(&out.join("synth_config.json"), &cfg)?;
    log::info!("{} subjects, {} episodes written to {}", cohort.subjects.len(), cohort.episodes.len(), out.display());
    Ok(())
}

fn preprocess(ctx: &Ctx, a: &PreprocessArgs) -> Result<()> {
    let input = a.input.clone().unwrap_or_else(|| ctx.root.clone());
    let out = a.out.clone().unwrap_or_else(|| input.join("cleaned"));
    let rate = a.rate.unwrap_or(ctx.cfg.rate);
    let (raw, _) = load_dataset(&input)?;
    let (cleaned, gaps) = preprocess_dataset(&raw, rate).map_err(|e| match e {
        glyconet::Error::Config(m) => usage(m),
        e => e.into(),
    })?;
    save_dataset(&out, &cleaned, None)?;
    write(&out.join("gaps.csv"), gaps_csv(&gaps))?;
    Ok(())
}

fn stats(ctx: &Ctx, cmd: &StatsCommand) -> Result<()> {
    match cmd {
        StatsCommand::Summary { per_age, input, out } => {
            let (ds, _) = load_dataset(&ctx.path(input, "cleaned"))?;
            if *per_age {
                write(out, age_rows_csv(&summary_per_age(&ds.series, &ds.subjects)))
            } else {
                write_json(out, &cohort_summary(&ds.series, &ds.subjects))
            }
        }
        StatsCommand::Tukey { edges, input, out } => {
            let (ds, _) = load_dataset(&ctx.path(input, "cleaned"))?;
            let eval = evaluate_split(&ds.series, &ds.subjects, edges).map_err(|e| usage(e.to_string()))?;
            if !eval.feasible {
                log::warn!("some age bin has no subjects; no test was run");
            }
            write(out, split_csv(&eval))
        }
    }
}

fn label(ctx: &Ctx, a: &LabelArgs) -> Result<()> {
    let (scheme, set) = if a.binary || (a.class_set.is_none() && ctx.cfg.binary) {
        (LabelScheme::Binary, None)
    } else {
        let set = class_set_arg(a.class_set.as_deref().unwrap_or(&ctx.cfg.class_set))?;
        (LabelScheme::Classes(set), Some(set))
    };
    let (ds, _) = load_dataset(&ctx.path(&a.input, "cleaned"))?;
    let labeled = label_dataset(&ds, scheme)?;
    let out = ctx.path(&a.out, "labeled");
    save_dataset(&out, &labeled, set)?;
    let dist = class_distribution(labeled.labels.iter().flatten().map(Vec::as_slice));
    write(&out.join("class_distribution.csv"), dist.to_csv(scheme))
}

fn sizes(ds: &Dataset) -> Vec<(Subject, usize)> {
    ds.series
        .iter()
        .filter_map(|s| ds.subject(&s.subject_id).map(|sub| (sub.clone(), s.observed_count())))
        .collect()
}

fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let (ds, _) = load_dataset(&ctx.path(&a.input, "labeled"))?;
    let plan = select_test_subjects(&sizes(&ds), a.test_per_group.unwrap_or(ctx.cfg.test_per_group));
    write_json(&ctx.split_file(&a.out), &plan)
}

fn windows(ctx: &Ctx, a: &WindowsArgs) -> Result<()> {
    let (ds, _) = load_dataset(&ctx.path(&a.input, "labeled"))?;
    let scheme = ds
        .label_scheme
        .ok_or_else(|| glyconet::Error::Invalid("dataset has no labels; run `label` first".into()))?;
    let isl = a.isl.unwrap_or(ctx.cfg.isl_minutes);
    let length = window_length(isl, ds.rate).map_err(|e| usage(e.to_string()))?;
    let scaler = Scaler::default();
    let w = dataset_windows(&ds, isl, &scaler)?;
    let meta = WindowsMeta {
        pipeline_version: PIPELINE_VERSION.to_string(),
        isl_minutes: isl,
        rate: ds.rate,
        length,
        label_scheme: scheme,
        scaler,
        count: w.len(),
        subject_groups: ds.subjects.iter().map(|s| (s.subject_id.clone(), s.age_group)).collect(),
    };
    let out = ctx.path(&a.out, "windows");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    save_windows(&out, &w, &meta)?;
    Ok(())
}

/// Windows plus split, and the input hashes for the run manifest.
fn load_prepared(ctx: &Ctx, windows: &Option<PathBuf>, split: &Option<PathBuf>) -> Result<(Prepared, BTreeMap<String, String>)> {
    let wdir = ctx.windows_dir(windows);
    let split_path = ctx.split_file(split);
    let (w, meta) = load_windows(&wdir)?;
    let plan: SplitPlan = read_json(&split_path)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("windows.csv".to_string(), file_hash(&wdir.join(glyconet::windowing::WINDOWS_CSV))?);
    inputs.insert("split.json".to_string(), file_hash(&split_path)?);
    Ok((Prepared::new(meta.label_scheme, meta.isl_minutes, meta.rate, w, plan), inputs))
}

fn run_name(scope: &str) -> String {
    scope.replace(':', "_").replace('+', "plus")
}

fn write_population(dir: &Path, prep: &Prepared, run: &PopulationRun, cfg: &TrainConfig, inputs: &BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_model(&run.model, &dir.join("model.json")).with_context(|| format!("writing {}", dir.join("model.json").display()))?;
    run.evaluation.write(dir)?;
    let mut log = String::from("epoch,mean_loss\n");
    for e in &run.log {
        log.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    write(&dir.join("training_log.csv"), log)?;
    let manifest = RunManifest::for_population(prep, run, cfg, inputs.clone());
    if !manifest.leak_audit_passed {
        anyhow::bail!("leak audit failed for {}", dir.display());
    }
    write_json(&dir.join("run_manifest.json"), &manifest)
}

fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let scope_text = a.scope.clone().unwrap_or_else(|| ctx.cfg.scope.clone());
    let scope: Option<Scope> = match scope_text.as_str() {
        "aspb" => None,
        s => Some(s.parse().map_err(|e: glyconet::Error| usage(e.to_string()))?),
    };
    let preset = match scope {
        None | Some(Scope::AgeGroup(_)) => TrainConfig::aspb(),
        Some(Scope::Global) => TrainConfig::gpb(),
        Some(Scope::Finetune(_)) => return Err(usage("fine-tuning scopes are run with the `finetune` subcommand")),
    };
    let cfg = ctx.train_config(preset, &a.flags)?;
    let (prep, inputs) = load_prepared(ctx, &a.flags.windows, &a.flags.split)?;
    let dir = ctx.runs.join(a.name.clone().unwrap_or_else(|| run_name(&scope_text)));
    let Some(scope) = scope else {
        let groups: Vec<AgeGroup> = AgeGroup::KNOWN.into_iter().filter(|g| prep.plan.train_subjects.contains_key(g)).collect();
        if groups.is_empty() {
            return Err(glyconet::Error::EmptyScope("no age group has training subjects".into()).into());
        }
        let mut parts = Vec::new();
        for g in groups {
            let scope = Scope::AgeGroup(g);
            let run = train_population(&prep, &scope, &cfg)?;
            write_population(&dir.join(run_name(&scope.to_string())), &prep, &run, &cfg, &inputs)?;
            parts.push(run.evaluation);
        }
        fs::create_dir_all(&dir)?;
        return Ok(Evaluation::merge(parts)?.write(&dir)?);
    };
    let run = train_population(&prep, &scope, &cfg)?;
    write_population(&dir, &prep, &run, &cfg, &inputs)?;
    let m = &run.evaluation.overall.macro_avg;
    println!("{scope}: recall {:.4} precision {:.4} f1 {:.4} pr_auc {:.4}", m.recall, m.precision, m.f1, m.pr_auc);
    Ok(())
}

fn load_run_model(run: &Path) -> Result<(FcnModel, RunManifest)> {
    let manifest: RunManifest = read_json(&run.join("run_manifest.json"))?;
    let path = run.join("model.json");
    let model = load_model(&path).map_err(|e| glyconet::Error::Data {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok((model, manifest))
}

fn finetune_cmd(ctx: &Ctx, a: &FinetuneArgs) -> Result<()> {
    let (base, base_manifest) = load_run_model(&a.base)?;
    let (prep, inputs) = load_prepared(ctx, &a.flags.windows, &a.flags.split)?;
    let subjects = if a.subject.is_empty() { base_manifest.test_subjects.clone() } else { a.subject.clone() };
    if let Some(s) = subjects.iter().find(|s| !prep.plan.all_test().contains(s.as_str())) {
        return Err(usage(format!("{s} is not a test subject")));
    }
    let cfg = ctx.train_config(TrainConfig::finetune(), &a.flags)?;
    let run = finetune(&base, &prep, &subjects, &cfg)?;
    let out = a.out.clone().unwrap_or_else(|| a.base.join("finetune"));
    run.base.write(&out.join("base"))?;
    run.tuned.write(&out.join("tuned"))?;
    for (id, m) in &run.models {
        let p = out.join("models").join(format!("{id}.json"));
        fs::create_dir_all(p.parent().unwrap_or(&out))?;
        save_model(m, &p).with_context(|| format!("writing {}", p.display()))?;
    }
    let personal: Vec<&WindowSample> = subjects
        .iter()
        .filter_map(|id| prep.personal_split(id))
        .flat_map(|(train, _)| train.iter())
        .collect();
    let test: Vec<&WindowSample> = subjects.iter().filter_map(|id| prep.personal_split(id)).flat_map(|(_, t)| t.iter()).collect();
    let manifest = RunManifest {
        pipeline_version: PIPELINE_VERSION.to_string(),
        kind: "finetune".into(),
        scope: format!("finetune:{}", base_manifest.scope),
        scheme: prep.scheme,
        isl_minutes: prep.isl_minutes,
        rate: prep.rate,
        config: cfg.clone(),
        seeds: vec![cfg.seed],
        train_subjects: run.tuned.per_subject.keys().cloned().collect(),
        test_subjects: run.tuned.per_subject.keys().cloned().collect(),
        train_windows: personal.len(),
        train_fingerprint: windows_fingerprint(&personal),
        test_fingerprint: windows_fingerprint(&test),
        inputs,
        leak_audit_passed: true,
        pr_auc_definition: glyconet::metrics::PR_AUC_DEFINITION.into(),
    };
    write_json(&out.join("run_manifest.json"), &manifest)?;
    if !run.skipped.is_empty() {
        log::warn!("skipped: {}", run.skipped.join(", "));
    }
    let (b, t) = (&run.base.overall.macro_avg, &run.tuned.overall.macro_avg);
    println!("base f1 {:.4} -> fine-tuned f1 {:.4}", b.f1, t.f1);
    Ok(())
}

fn evaluate_cmd(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let (model, manifest) = load_run_model(&a.run)?;
    let (prep, _) = load_prepared(ctx, &a.windows, &a.split)?;
    let scope: Scope = manifest.scope.parse()?;
    let eval = evaluate_subjects(&model, &prep, &prep.test_subjects(&scope))?;
    eval.write(&a.out.clone().unwrap_or_else(|| a.run.join("evaluation")))?;
    Ok(())
}

fn ablate(ctx: &Ctx, a: &AblateArgs) -> Result<()> {
    let (cleaned, _) = load_dataset(&ctx.path(&a.input, "cleaned"))?;
    let split_path = ctx.split_file(&a.split);
    let plan: SplitPlan = read_json(&split_path)?;
    let mut cells = default_ablation_grid();
    if !a.cell.is_empty() {
        if let Some(bad) = a.cell.iter().find(|c| !cells.iter().any(|x| &x.name == *c)) {
            let names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
            return Err(usage(format!("unknown cell '{bad}'; known: {}", names.join(", "))));
        }
        cells.retain(|c| a.cell.contains(&c.name));
    }
    let seeds = a.seeds.clone().unwrap_or_else(|| ctx.cfg.ablation_seeds.clone());
    let fraction = a.fraction.unwrap_or(ctx.cfg.ablation_fraction);
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(usage("--fraction must lie in (0, 1]"));
    }
    let base = TrainConfig {
        batch_size: a.batch_size.or(ctx.cfg.batch_size).unwrap_or(128),
        epochs: a.epochs.or(ctx.cfg.epochs).unwrap_or(20),
        gamma: ctx.cfg.gamma,
        lr: ctx.cfg.lr.unwrap_or(1e-3),
        ..TrainConfig::ablation(ctx.seed)
    };
    let table = run_ablation(&cleaned, &plan, &cells, &seeds, ctx.seed, fraction, &base)?;
    let dir = ctx.runs.join(a.name.as_deref().unwrap_or("ablation"));
    write(&dir.join("ablation.csv"), table.to_csv())?;
    write_json(&dir.join("ablation.json"), &table)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("split.json".to_string(), file_hash(&split_path)?);
    write_json(
        &dir.join("run_manifest.json"),
        &serde_json::json!({
            "pipeline_version": PIPELINE_VERSION,
            "kind": "ablation",
            "config": base,
            "seeds": seeds,
            "sampling_seed": ctx.seed,
            "fraction": fraction,
            "train_subjects": table.train_subjects,
            "test_subjects": table.test_subjects,
            "inputs": inputs,
            "pr_auc_definition": glyconet::metrics::PR_AUC_DEFINITION,
        }),
    )?;
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} cells failed; see ablation.csv", table.rows.len());
    }
    Ok(())
}

fn compare(ctx: &Ctx, a: &CompareArgs) -> Result<()> {
    let gpb: Evaluation = read_json(&ctx.run_path(&a.gpb, "global").join("metrics.json"))?;
    let aspb: Evaluation = read_json(&ctx.run_path(&a.aspb, "aspb").join("metrics.json"))?;
    let cmp = compare_scopes(&gpb, &aspb)?;
    let out = ctx.run_path(&a.out, "compare");
    write(&out.join("comparison.csv"), cmp.to_csv())?;
    write_json(&out.join("comparison.json"), &cmp)
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let Some(path) = &cli.config else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| glyconet::Error::Data {
        path: path.clone(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let root = cli.data_dir.clone().unwrap_or_else(|| cfg.data_dir.clone());
    let artifacts = cli.artifact_dir.clone().or_else(|| cfg.artifact_dir.clone()).unwrap_or_else(|| root.clone());
    let ctx = Ctx {
        runs: artifacts.join("runs"),
        root,
        seed: cli.seed.unwrap_or(cfg.seed),
        cfg,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("starting the worker pool")?;
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Synth(a) => synth(&ctx, a),
        Command::Preprocess(a) => preprocess(&ctx, a),
        Command::Stats(c) => stats(&ctx, c),
        Command::Label(a) => label(&ctx, a),
        Command::Split(a) => split(&ctx, a),
        Command::Windows(a) => windows(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Finetune(a) => finetune_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate_cmd(&ctx, a),
        Command::Ablate(a) => ablate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<glyconet::Error>() {
            return match e {
                glyconet::Error::Config(_) => 1,
                e if e.is_data_error() => 2,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
