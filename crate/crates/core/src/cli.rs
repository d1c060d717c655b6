//! Config-driven pipeline: `train → group → attribute → eval`, plus `bench`.
//!
//! Every stage reads the JSON [`RunConfig`] and the artifacts of earlier
//! stages from the output directory, and writes its own artifacts
//! atomically. The dataset (including any label flips) is regenerated from
//! the config on every invocation.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attributors::{influence, loo_oracle, tracin, trak, AttributionScores, Method, PropertyFn, TrakParams};
use crate::datahub::{
    flip_labels, load_csv, make_blobs, read_scores, write_atomic, write_scores, CorruptionRecord, Dataset,
};
use crate::error::{Error, Result};
use crate::evalkit::{bench_da_vs_ggda, noisy_label_auc, pruning_eval, retraining_score, EvalReport, EvalRow};
use crate::grouping::{group, GroupingMethod, Partition};
use crate::hessians::HessianStrategy;
use crate::models::{train, Architecture, Checkpoints, ModelState, TrainConfig};
use crate::numkit::{self, derive_seed};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "GGDA_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        n: usize,
        dim: usize,
        classes: usize,
        separation: f64,
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Logreg,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// Snapshot period in epochs for TracIn checkpoints; 0 keeps only the final state.
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingSection {
    pub method: GroupingMethod,
    pub group_size: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    pub method: Method,
    #[serde(default = "default_hessian")]
    pub hessian: HessianStrategy,
    #[serde(default = "default_property")]
    pub property: PropertyFn,
    #[serde(default)]
    pub trak: TrakParams,
    #[serde(default = "default_loo_seeds")]
    pub loo_seeds: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_hessian() -> HessianStrategy {
    HessianStrategy::Identity
}

fn default_property() -> PropertyFn {
    PropertyFn::MeanTestLoss
}

fn default_loo_seeds() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_prune_fractions")]
    pub prune_fractions: Vec<f64>,
    #[serde(default = "default_eval_seeds")]
    pub n_seeds: usize,
    /// Fraction of training labels flipped before any stage runs.
    #[serde(default)]
    pub flip_fraction: Option<f64>,
}

fn default_fractions() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.2]
}

fn default_prune_fractions() -> Vec<f64> {
    vec![0.25, 0.5, 0.75]
}

fn default_eval_seeds() -> usize {
    10
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            prune_fractions: default_prune_fractions(),
            n_seeds: default_eval_seeds(),
            flip_fraction: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_bench_sizes")]
    pub group_sizes: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
}

fn default_bench_sizes() -> Vec<usize> {
    vec![1, 4, 16, 64, 256, 1024]
}

fn default_reps() -> usize {
    3
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            group_sizes: default_bench_sizes(),
            reps: default_reps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub train: TrainSection,
    pub grouping: GroupingSection,
    pub attribution: AttributionSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bench: BenchSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

// stream ids for seeds derived from the top-level seed
const STREAM_DATA: u64 = 0;
const STREAM_FLIP: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_GROUP: u64 = 3;
const STREAM_ATTR: u64 = 4;
const STREAM_EVAL: u64 = 5;

fn ensure(cond: bool, field: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(field, message))
    }
}

impl RunConfig {
    /// Parses and validates; relative paths resolve against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        if let DatasetSpec::Csv { path, .. } = &mut cfg.dataset {
            if path.is_relative() {
                *path = base_dir.join(&*path);
            }
        }
        if let Some(out) = &mut cfg.output_dir {
            if out.is_relative() {
                *out = base_dir.join(&*out);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.dataset {
            DatasetSpec::Blobs {
                n,
                dim,
                classes,
                separation,
                ..
            } => {
                ensure(*n >= 2, "dataset.n", "must be ≥ 2")?;
                ensure(*dim >= 1, "dataset.dim", "must be ≥ 1")?;
                ensure(*classes >= 1, "dataset.classes", "must be ≥ 1")?;
                ensure(
                    separation.is_finite() && *separation >= 0.0,
                    "dataset.separation",
                    "must be finite and ≥ 0",
                )?;
            }
            DatasetSpec::Csv { path, .. } => {
                ensure(
                    path.is_file(),
                    "dataset.path",
                    &format!("file {} does not exist", path.display()),
                )?;
            }
        }
        if let ModelSpec::Mlp { hidden } = &self.model {
            ensure(
                !hidden.is_empty() && hidden.iter().all(|&h| h > 0),
                "model.hidden",
                "needs ≥ 1 positive layer width",
            )?;
        }
        let t = &self.train.config;
        ensure(
            t.learning_rate > 0.0 && t.learning_rate.is_finite(),
            "train.learning_rate",
            "must be > 0",
        )?;
        ensure(t.epochs >= 1, "train.epochs", "must be ≥ 1")?;
        ensure(t.batch_size >= 1, "train.batch_size", "must be ≥ 1")?;
        ensure(t.weight_decay >= 0.0, "train.weight_decay", "must be ≥ 0")?;
        t.validate().map_err(|e| Error::config("train", e.to_string()))?;
        ensure(self.grouping.group_size >= 1, "grouping.group_size", "must be ≥ 1")?;
        self.attribution
            .hessian
            .validate()
            .map_err(|e| Error::config("attribution.hessian", e.to_string()))?;
        self.attribution
            .trak
            .validate()
            .map_err(|e| Error::config("attribution.trak", e.to_string()))?;
        ensure(self.attribution.loo_seeds >= 1, "attribution.loo_seeds", "must be ≥ 1")?;
        for (i, f) in self.eval.fractions.iter().enumerate() {
            ensure(
                (0.0..1.0).contains(f),
                &format!("eval.fractions[{i}]"),
                "must be in [0, 1)",
            )?;
        }
        for (i, f) in self.eval.prune_fractions.iter().enumerate() {
            ensure(
                (0.0..1.0).contains(f),
                &format!("eval.prune_fractions[{i}]"),
                "must be in [0, 1)",
            )?;
        }
        ensure(self.eval.n_seeds >= 1, "eval.n_seeds", "must be ≥ 1")?;
        if let Some(f) = self.eval.flip_fraction {
            ensure(f > 0.0 && f < 1.0, "eval.flip_fraction", "must be in (0, 1)")?;
        }
        ensure(
            self.bench.group_sizes.contains(&1),
            "bench.group_sizes",
            "must include 1",
        )?;
        ensure(
            self.bench.group_sizes.iter().all(|&s| s >= 1),
            "bench.group_sizes",
            "sizes must be ≥ 1",
        )?;
        ensure(self.bench.reps >= 1, "bench.reps", "must be ≥ 1")?;
        Ok(())
    }

    fn stream(&self, id: u64) -> u64 {
        derive_seed(self.seed, &[id])
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train
            .config
            .with_seed(derive_seed(self.seed, &[STREAM_TRAIN, self.train.config.seed]))
    }

    pub fn grouping_seed(&self) -> u64 {
        self.grouping.seed.unwrap_or_else(|| self.stream(STREAM_GROUP))
    }

    pub fn attribution_seed(&self) -> u64 {
        self.attribution.seed.unwrap_or_else(|| self.stream(STREAM_ATTR))
    }

    /// The dataset and, when `eval.flip_fraction` is set, the flip record.
    pub fn dataset(&self) -> Result<(Dataset, Option<CorruptionRecord>)> {
        let ds = match &self.dataset {
            DatasetSpec::Blobs {
                n,
                dim,
                classes,
                separation,
                seed,
            } => {
                let mut rng = numkit::rng(seed.unwrap_or_else(|| self.stream(STREAM_DATA)));
                make_blobs(*n, *dim, *classes, *separation, &mut rng)?
            }
            DatasetSpec::Csv { path, label_column } => load_csv(path, label_column).map_err(|e| match e {
                Error::Io { .. } => Error::config("dataset.path", e.to_string()),
                other => other,
            })?,
        };
        match self.eval.flip_fraction {
            None => Ok((ds, None)),
            Some(f) => {
                let (noisy, rec) = flip_labels(&ds, f, &mut numkit::rng(self.stream(STREAM_FLIP)))?;
                Ok((noisy, Some(rec)))
            }
        }
    }

    pub fn architecture(&self, ds: &Dataset) -> Architecture {
        match &self.model {
            ModelSpec::Logreg => Architecture::logreg(ds.num_features(), ds.num_classes()),
            ModelSpec::Mlp { hidden } => Architecture::mlp(ds.num_features(), hidden, ds.num_classes()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Retrain,
    Prune,
    Noisy,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoints.
    Train,
    /// Partition the training set.
    Group,
    /// Score every group.
    Attribute,
    /// Evaluate a score file.
    Eval {
        #[arg(long, value_enum)]
        metric: Metric,
    },
    /// Time grouped against per-point attribution.
    Bench,
}

#[derive(Debug, Parser)]
#[command(name = "ggda", version, about = "Group data attribution pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

/// Paths of the artifacts inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn partition(&self) -> PathBuf {
        self.root.join("partition.json")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.json")
    }

    pub fn bench(&self) -> PathBuf {
        self.root.join("bench.csv")
    }
}

fn read_artifact<T>(path: &Path, stage: &str, load: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if !path.exists() {
        return Err(Error::invalid(format!(
            "{} not found; run `ggda {stage}` first",
            path.display()
        )));
    }
    load(path)
}

fn load_checkpoints(layout: &Layout) -> Result<Checkpoints> {
    let dir = layout.checkpoints();
    let mut files: Vec<PathBuf> = match std::fs::read_dir(&dir) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    let states = if files.is_empty() {
        vec![read_artifact(&layout.model(), "train", |p| ModelState::load(p))?]
    } else {
        files.iter().map(ModelState::load).collect::<Result<_>>()?
    };
    Ok(Checkpoints { states })
}

fn checkpoint_name(tag: Option<&str>, fallback: usize) -> String {
    let epoch = tag
        .and_then(|t| t.strip_prefix("epoch-"))
        .and_then(|e| e.parse::<usize>().ok())
        .unwrap_or(fallback);
    format!("epoch_{epoch:04}.json")
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let (ds, _) = cfg.dataset()?;
    let arch = cfg.architecture(&ds);
    let (model, ckpts) = train(&arch, &ds, &cfg.train_config(), cfg.train.snapshot_every)?;
    let dir = layout.checkpoints();
    if dir.exists() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|x| x == "json") {
                std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    for (i, s) in ckpts.states.iter().enumerate() {
        s.save(dir.join(checkpoint_name(s.tag.as_deref(), i)))?;
    }
    model.save(layout.model())
}

pub fn cmd_group(cfg: &RunConfig, layout: &Layout) -> Result<Partition> {
    let (ds, _) = cfg.dataset()?;
    let model = if cfg.grouping.method.needs_model() {
        Some(read_artifact(&layout.model(), "train", |p| ModelState::load(p))?)
    } else {
        None
    };
    let part = group(
        &ds,
        model.as_ref(),
        cfg.grouping.method,
        cfg.grouping.group_size,
        cfg.grouping_seed(),
    )?;
    part.save(layout.partition())?;
    Ok(part)
}

pub fn cmd_attribute(cfg: &RunConfig, layout: &Layout) -> Result<AttributionScores> {
    let (ds, _) = cfg.dataset()?;
    let part = read_artifact(&layout.partition(), "group", |p| Partition::load(p))?;
    part.validate(ds.n_train())?;
    let a = &cfg.attribution;
    a.property
        .validate(&ds)
        .map_err(|e| Error::config("attribution.property", e.to_string()))?;
    let seed = cfg.attribution_seed();
    let tc = cfg.train_config();
    let arch = cfg.architecture(&ds);
    let scores = match a.method {
        Method::Influence => {
            let m = read_artifact(&layout.model(), "train", |p| ModelState::load(p))?;
            influence(&m, &ds, &part, &a.property, &a.hessian, tc.weight_decay, seed)?
        }
        Method::Tracin => tracin(&load_checkpoints(layout)?, &ds, &part, &a.property)?,
        Method::Trak => trak(&arch, &tc, &ds, &part, &a.property, &a.trak, seed)?,
        Method::Loo => loo_oracle(&arch, &ds, &part, &a.property, &tc, a.loo_seeds, seed)?,
    };
    write_scores(&scores.to_score_file(), layout.scores())?;
    Ok(scores)
}

fn scores_from_file(layout: &Layout, cfg: &RunConfig) -> Result<AttributionScores> {
    let sf = read_artifact(&layout.scores(), "attribute", |p| read_scores(p))?;
    AttributionScores::from_score_file(&sf, cfg.attribution.property.clone())
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, metric: Metric) -> Result<EvalReport> {
    let (ds, corruption) = cfg.dataset()?;
    let scores = scores_from_file(layout, cfg)?;
    scores.partition.validate(ds.n_train())?;
    let arch = cfg.architecture(&ds);
    let tc = cfg.train_config();
    let plan_seed = cfg.stream(STREAM_EVAL);
    let e = &cfg.eval;
    let (stem, report) = match metric {
        Metric::Retrain => (
            "eval_retrain",
            retraining_score(&scores, &arch, &ds, &tc, &e.fractions, e.n_seeds, plan_seed)?,
        ),
        Metric::Prune => (
            "eval_prune",
            pruning_eval(&scores, &arch, &ds, &tc, &e.prune_fractions, e.n_seeds, plan_seed)?,
        ),
        Metric::Noisy => {
            let rec = corruption
                .ok_or_else(|| Error::config("eval.flip_fraction", "the noisy metric needs flipped labels"))?;
            let started = std::time::Instant::now();
            let auc = noisy_label_auc(&scores, &rec)?;
            (
                "eval_noisy",
                EvalReport {
                    metric: "noisy_auc".into(),
                    baseline: None,
                    rows: vec![EvalRow {
                        fraction: rec.fraction,
                        mean: auc,
                        stderr: 0.0,
                        n_seeds: 1,
                        runtime_s: started.elapsed().as_secs_f64(),
                    }],
                },
            )
        }
    };
    report.save(&layout.root, stem)?;
    Ok(report)
}

pub fn cmd_bench(cfg: &RunConfig, layout: &Layout) -> Result<()> {
    let (ds, _) = cfg.dataset()?;
    let m = read_artifact(&layout.model(), "train", |p| ModelState::load(p))?;
    let a = &cfg.attribution;
    let rep = bench_da_vs_ggda(
        &m,
        &ds,
        &a.property,
        &a.hessian,
        cfg.train.config.weight_decay,
        &cfg.bench.group_sizes,
        cfg.bench.reps,
        cfg.attribution_seed(),
    )?;
    write_atomic(layout.bench(), rep.to_csv().as_bytes())
}

/// Output directory: `--out`, then `$GGDA_OUT`, then `output_dir`, then `./out`.
pub fn resolve_out(cli_out: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    if let Some(p) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(p);
    }
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config", "a config file is required"))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let layout = Layout {
        root: resolve_out(cli.out.as_deref(), &cfg),
    };
    match cli.command {
        Command::Train => cmd_train(&cfg, &layout),
        Command::Group => cmd_group(&cfg, &layout).map(drop),
        Command::Attribute => cmd_attribute(&cfg, &layout).map(drop),
        Command::Eval { metric } => cmd_eval(&cfg, &layout, metric).map(drop),
        Command::Bench => cmd_bench(&cfg, &layout),
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        e if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_OTHER,
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
