//! Experiment configuration, single runs and grids of runs.
//!
//! An [`ExperimentConfig`] is a JSON document with a `schema_version`, the
//! dataset, the network, the method tag, both stage configurations, the
//! rebalancing settings and a seed. Unknown fields are rejected. Relative
//! file paths resolve against the directory of the config file.
//!
//! Runs are deterministic in `(config, seed)`. Grids run their cells on up
//! to `TAILFORGE_THREADS` worker threads; each cell is an independent run,
//! and results are returned in cell order, so the thread count never
//! changes the output.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{
    long_tail_counts, read_dataset, sample_seed, stratified_split, GaussianMixture, LabeledDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalReport, GroupSpec};
use crate::model::{save_checkpoint, ExtractorSpec, InputShape, NetworkSpec};
use crate::rebalance::RebalanceConfig;
use crate::trainer::{
    evaluate, run_baseline, EpochRecord, Method, RunOutcome, Stage1Config, Stage1Method,
    Stage2Config, Stage2Kind, StagePlan,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable bounding the number of grid worker threads.
pub const THREADS_ENV: &str = "TAILFORGE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub method: Method,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub rebalance: RebalanceConfig,
    /// Majority/minority group sizes; defaults by class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupSpec>,
    #[serde(default)]
    pub seed: u64,
}

/// Where the train/val/test splits come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Long-tailed Gaussian mixture training set with balanced held-out
    /// sets drawn from the same class means.
    Synthetic {
        num_classes: usize,
        dims: usize,
        rho: f64,
        n_max: usize,
        separation: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        /// 0 disables validation.
        #[serde(default)]
        val_per_class: usize,
        /// Data seed; the run seed when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Pre-split dataset files.
    Files {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val: Option<PathBuf>,
        test: PathBuf,
    },
    /// One file split per class into train/val/test fractions.
    Split {
        path: PathBuf,
        #[serde(default = "default_fractions")]
        fractions: [f64; 3],
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_test_per_class() -> usize {
    500
}

fn default_fractions() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// Overrides of the default network for the dataset's input shape.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub extractor: Option<ExtractorSpec>,
    /// Defaults to the last MLP width, or 32 for a CNN.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub projection: Option<[usize; 3]>,
}

impl ModelConfig {
    pub fn network_spec(&self, input: &InputShape, num_classes: usize) -> Result<NetworkSpec> {
        let mut spec = match *input {
            InputShape::Vector { dim } => NetworkSpec::default_vector(dim, num_classes),
            InputShape::Image {
                channels,
                height,
                width,
            } => NetworkSpec::default_image(channels, height, width, num_classes),
        };
        if let Some(e) = &self.extractor {
            if let ExtractorSpec::Mlp { widths } = e {
                if let Some(&last) = widths.last() {
                    spec.feature_dim = last;
                }
            }
            spec.extractor = e.clone();
        }
        if let Some(d) = self.feature_dim {
            spec.feature_dim = d;
        }
        if let Some(p) = self.projection {
            spec.projection = p;
        }
        spec.validate().map_err(|e| config_error("model", e))?;
        Ok(spec)
    }
}

fn config_error(field: &str, e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config {
            field: field.into(),
            message: other.to_string(),
        },
    }
}

impl ExperimentConfig {
    /// A synthetic Gaussian-mixture experiment with default settings.
    pub fn synthetic(
        method: Method,
        num_classes: usize,
        dims: usize,
        rho: f64,
        n_max: usize,
        separation: f64,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::Synthetic {
                num_classes,
                dims,
                rho,
                n_max,
                separation,
                test_per_class: default_test_per_class(),
                val_per_class: 0,
                seed: None,
            },
            model: ModelConfig::default(),
            method,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            rebalance: RebalanceConfig::default(),
            groups: None,
            seed: 0,
        }
    }

    /// Parse and validate. Errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                field: if path == "." { "<root>".into() } else { path },
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; relative dataset paths become relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(dir) = path.parent() {
            cfg.dataset.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config {
                field: "schema_version".into(),
                message: format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            });
        }
        self.plan().validate()?;
        self.stage1
            .validate()
            .map_err(|e| config_error("stage1", e))?;
        self.stage2
            .validate()
            .map_err(|e| config_error("stage2", e))?;
        self.dataset.validate()
    }

    pub fn plan(&self) -> StagePlan {
        StagePlan {
            stage1: self.stage1.clone(),
            stage2: self.stage2.clone(),
            rebalance: self.rebalance.clone(),
        }
    }
}

impl DatasetConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetConfig::Synthetic { .. } => {}
            DatasetConfig::Files { train, val, test } => {
                fix(train);
                if let Some(v) = val {
                    fix(v);
                }
                fix(test);
            }
            DatasetConfig::Split { path, .. } => fix(path),
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config {
                field: format!("dataset.{field}"),
                message,
            })
        };
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                dims,
                rho,
                n_max,
                separation,
                test_per_class,
                ..
            } => {
                if *num_classes < 2 {
                    return bad("num_classes", "need at least 2 classes".into());
                }
                if dims < num_classes {
                    return bad(
                        "dims",
                        format!("must be at least num_classes ({num_classes})"),
                    );
                }
                if !(*separation > 0.0) || !separation.is_finite() {
                    return bad("separation", format!("must be > 0, got {separation}"));
                }
                if *test_per_class == 0 {
                    return bad("test_per_class", "must be positive".into());
                }
                long_tail_counts(*num_classes, *n_max, *rho)
                    .map_err(|e| config_error("dataset.rho", e))?;
            }
            DatasetConfig::Files { .. } => {}
            DatasetConfig::Split { fractions, .. } => {
                let sum: f64 = fractions.iter().sum();
                if fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return bad(
                        "fractions",
                        format!("need three positive fractions summing to 1, got {fractions:?}"),
                    );
                }
            }
        }
        Ok(())
    }

    /// Materialize the splits for run seed `seed`.
    pub fn load(&self, seed: u64) -> Result<Splits> {
        match self {
            DatasetConfig::Synthetic {
                num_classes,
                dims,
                rho,
                n_max,
                separation,
                test_per_class,
                val_per_class,
                seed: data_seed,
            } => {
                let s = data_seed.unwrap_or(seed);
                let mixture = GaussianMixture::new(*num_classes, *dims, *separation, s)?;
                let train = mixture.sample(
                    &long_tail_counts(*num_classes, *n_max, *rho)?,
                    sample_seed(s, 0),
                )?;
                let test =
                    mixture.sample(&vec![*test_per_class; *num_classes], sample_seed(s, 1))?;
                let val = if *val_per_class > 0 {
                    Some(mixture.sample(&vec![*val_per_class; *num_classes], sample_seed(s, 2))?)
                } else {
                    None
                };
                Ok(Splits { train, val, test })
            }
            DatasetConfig::Files { train, val, test } => {
                let train = read_dataset(train)?;
                let val = val.as_ref().map(read_dataset).transpose()?;
                let test = read_dataset(test)?;
                for other in val.iter().chain([&test]) {
                    if other.shape() != train.shape() || other.num_classes() != train.num_classes()
                    {
                        return Err(Error::Config {
                            field: "dataset".into(),
                            message: "train, val and test files disagree on shape or class count"
                                .into(),
                        });
                    }
                }
                Ok(Splits { train, val, test })
            }
            DatasetConfig::Split {
                path,
                fractions,
                seed: split_seed,
            } => {
                let all = read_dataset(path)?;
                let (train, val, test) =
                    stratified_split(&all, *fractions, split_seed.unwrap_or(seed))?;
                Ok(Splits {
                    train,
                    val: Some(val),
                    test,
                })
            }
        }
    }
}

pub struct Splits {
    pub train: LabeledDataset,
    pub val: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

/// Test-set evaluation of one run, tagged with its method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: Method,
    #[serde(flatten)]
    pub eval: EvalReport,
}

/// Final line of a run's JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub final_train_loss: Option<f64>,
    pub checkpoints: Vec<String>,
    pub mcr_all: f64,
    pub mcr_major: f64,
    pub mcr_minor: f64,
}

pub struct ExperimentRun {
    pub outcome: RunOutcome,
    pub report: RunReport,
}

impl ExperimentRun {
    pub fn summary(&self) -> RunSummary {
        let o = &self.outcome;
        let mut checkpoints = vec![STAGE1_CKPT.to_string()];
        if o.stage2.is_some() {
            checkpoints.push(STAGE2_CKPT.to_string());
        }
        RunSummary {
            method: o.method,
            seed: o.seed,
            stage1_epochs: o.stage1.epochs.len(),
            stage2_epochs: o.stage2.as_ref().map_or(0, |s| s.epochs.len()),
            final_train_loss: o.epochs().last().map(|e| e.train_loss),
            checkpoints,
            mcr_all: self.report.eval.mcr_all,
            mcr_major: self.report.eval.mcr_major,
            mcr_minor: self.report.eval.mcr_minor,
        }
    }

    /// JSON lines: one [`EpochRecord`] per epoch, then `{"summary": ...}`.
    pub fn record_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Final<'a> {
            summary: &'a RunSummary,
        }
        let mut out = String::new();
        for e in self.outcome.epochs() {
            out.push_str(&serde_json::to_string::<EpochRecord>(e)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&Final {
            summary: &self.summary(),
        })?);
        out.push('\n');
        Ok(out)
    }

    /// Write checkpoints, `record.jsonl` and `report.json` into `dir`,
    /// replacing whatever a previous run left there.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_checkpoint(dir.join(STAGE1_CKPT), &self.outcome.stage1.params)?;
        let s2 = dir.join(STAGE2_CKPT);
        match &self.outcome.stage2 {
            Some(stage) => save_checkpoint(&s2, &stage.params)?,
            None if s2.exists() => fs::remove_file(&s2).map_err(|e| Error::io(&s2, e))?,
            None => {}
        }
        write_text(dir.join(RECORD_FILE), &self.record_jsonl()?)?;
        write_text(
            dir.join(REPORT_FILE),
            &(serde_json::to_string_pretty(&self.report)? + "\n"),
        )
    }
}

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const RECORD_FILE: &str = "record.jsonl";
pub const REPORT_FILE: &str = "report.json";

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train `method` under `cfg` with `seed` and evaluate on the test split.
pub fn run_experiment(cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<ExperimentRun> {
    let splits = cfg.dataset.load(seed)?;
    let spec = cfg
        .model
        .network_spec(splits.train.shape(), splits.train.num_classes())?;
    let outcome = run_baseline(
        method,
        &spec,
        &splits.train,
        splits.val.as_ref(),
        &cfg.plan(),
        seed,
    )?;
    let k = splits.train.num_classes();
    let eval = evaluate(
        outcome.final_params(),
        &splits.test,
        &splits.train.class_counts()?,
        cfg.groups.unwrap_or(GroupSpec::for_classes(k)),
        seed,
    )?;
    Ok(ExperimentRun {
        outcome,
        report: RunReport { method, eval },
    })
}

/// Worker count from `TAILFORGE_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config {
                field: THREADS_ENV.into(),
                message: format!("expected a positive integer, got `{v}`"),
            }),
        },
    }
}

/// Evaluate `f(0..n)` on up to `threads` scoped workers. Results come back
/// in index order whatever the scheduling.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = threads.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(i);
                slots.lock().expect("no worker panicked holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|o| o.expect("every index ran"))
        .collect()
}

/// One run in a grid.
#[derive(Clone, Debug)]
pub struct MatrixCell {
    pub label: String,
    pub config: ExperimentConfig,
    pub method: Method,
    pub seed: u64,
    /// Per-cell output directory, if the cell's files should be kept.
    pub out_dir: Option<PathBuf>,
}

/// A list of independent runs.
#[derive(Clone, Debug, Default)]
pub struct ExperimentMatrix {
    pub cells: Vec<MatrixCell>,
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for c in &self.cells {
            if let Some(d) = &c.out_dir {
                if !seen.insert(d) {
                    return Err(Error::invalid(format!(
                        "two grid cells write to {}",
                        d.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Run every cell, writing per-cell outputs where requested. The first
    /// failing cell, in cell order, is reported.
    pub fn run(&self, threads: usize) -> Result<Vec<RunReport>> {
        self.validate()?;
        let results = parallel_map(self.cells.len(), threads, |i| {
            let c = &self.cells[i];
            let run = run_experiment(&c.config, c.method, c.seed)?;
            if let Some(dir) = &c.out_dir {
                run.write(dir)?;
            }
            Ok::<_, Error>(run.report)
        });
        results.into_iter().collect()
    }
}

/// Hyperparameters `sweep` can vary.
pub const SWEEP_PARAMS: [&str; 3] = ["lambda", "temperature", "margin"];

/// Set the named stage-1 loss hyperparameter.
pub fn apply_param(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    let loss = &mut cfg.stage1.loss;
    match param {
        "lambda" => loss.lambda = Some(value),
        "temperature" => loss.supcon.temperature = value,
        "margin" => loss.triplet.margin = value,
        _ => {
            return Err(Error::invalid(format!(
                "unknown sweep parameter `{param}`; valid: {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    cfg.validate()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub param_value: f64,
    pub seed: u64,
    pub mcr_all: f64,
    pub mcr_major: f64,
    pub mcr_minor: f64,
}

/// Sorted, de-duplicated grid values.
pub fn normalize_grid(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("grid value {v} is not finite")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Run the configured method at every grid value × seed. Rows are ordered
/// by grid value, then by seed as given.
pub fn sweep(
    cfg: &ExperimentConfig,
    param: &str,
    grid: &[f64],
    seeds: &[u64],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    let grid = normalize_grid(grid)?;
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    let mut matrix = ExperimentMatrix::default();
    let mut keys = Vec::new();
    for &v in &grid {
        let mut c = cfg.clone();
        apply_param(&mut c, param, v)?;
        for &seed in seeds {
            let label = format!("{param}={v}_seed={seed}");
            matrix.cells.push(MatrixCell {
                out_dir: out_dir.map(|d| d.join("cells").join(&label)),
                label,
                config: c.clone(),
                method: cfg.method,
                seed,
            });
            keys.push((v, seed));
        }
    }
    let reports = matrix.run(threads)?;
    Ok(keys
        .into_iter()
        .zip(reports)
        .map(|((param_value, seed), r)| SweepRow {
            param_value,
            seed,
            mcr_all: r.eval.mcr_all,
            mcr_major: r.eval.mcr_major,
            mcr_minor: r.eval.mcr_minor,
        })
        .collect())
}

pub fn sweep_csv(param: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{param},seed,mcr_all,mcr_major,mcr_minor\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4}\n",
            r.param_value, r.seed, r.mcr_all, r.mcr_major, r.mcr_minor
        ));
    }
    out
}

/// The five on/off combinations of cross-entropy, supervised contrastive
/// learning and classifier re-weighting.
pub fn ablation_rows() -> [(&'static str, Method); 5] {
    use Stage1Method::{Ce, CeSc, Sc};
    [
        ("CE", Method::one_stage(Ce)),
        ("CE+SC", Method::one_stage(CeSc)),
        ("CE+cRW", Method::two_stage(Ce, Stage2Kind::Crw)),
        ("SC+cRW", Method::two_stage(Sc, Stage2Kind::Crw)),
        ("CE+SC+cRW", Method::two_stage(CeSc, Stage2Kind::Crw)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub row: String,
    pub method: Method,
    pub ce: bool,
    pub sc: bool,
    pub crw: bool,
    /// Median over seeds.
    pub mcr_all: f64,
    pub mcr_major: f64,
    pub mcr_minor: f64,
    pub runs: Vec<RunReport>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Run the five ablation rows on shared seeds. Each row reports the median
/// of its MCRs over the seeds.
pub fn ablate(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("no seeds"));
    }
    let rows = ablation_rows();
    let mut matrix = ExperimentMatrix::default();
    for (label, method) in rows {
        for &seed in seeds {
            let label = format!("{label}_seed={seed}");
            matrix.cells.push(MatrixCell {
                out_dir: out_dir.map(|d| d.join("cells").join(&label)),
                label,
                config: ExperimentConfig {
                    method,
                    ..cfg.clone()
                },
                method,
                seed,
            });
        }
    }
    let reports = matrix.run(threads)?;
    Ok(rows
        .iter()
        .zip(reports.chunks(seeds.len()))
        .map(|(&(label, method), runs)| {
            let med = |f: fn(&EvalReport) -> f64| {
                median(&runs.iter().map(|r| f(&r.eval)).collect::<Vec<_>>())
            };
            AblationRow {
                row: label.to_string(),
                method,
                ce: method.stage1.uses_cross_entropy(),
                sc: method.stage1.metric().is_some(),
                crw: method.stage2 == Some(Stage2Kind::Crw),
                mcr_all: med(|e| e.mcr_all),
                mcr_major: med(|e| e.mcr_major),
                mcr_minor: med(|e| e.mcr_minor),
                runs: runs.to_vec(),
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("row,ce,sc,crw,mcr_all,mcr_major,mcr_minor\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{:.4}\n",
            r.row, r.ce as u8, r.sc as u8, r.crw as u8, r.mcr_all, r.mcr_major, r.mcr_minor
        ));
    }
    out
}

/// CSV with one row per (method, seed), sorted by method tag then seed.
pub fn reports_csv(reports: &[RunReport]) -> String {
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.method
            .to_string()
            .cmp(&b.method.to_string())
            .then(a.eval.seed.cmp(&b.eval.seed))
    });
    let mut out = String::from("method,seed,mcr_all,mcr_major,mcr_minor,mcr_medium\n");
    for r in sorted {
        let medium = r
            .eval
            .mcr_medium
            .map(|m| format!("{m:.4}"))
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{}\n",
            r.method, r.eval.seed, r.eval.mcr_all, r.eval.mcr_major, r.eval.mcr_minor, medium
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::LrSchedule;

    fn tiny(method: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::synthetic(method.parse().unwrap(), 3, 4, 4.0, 40, 6.0);
        cfg.dataset = DatasetConfig::Synthetic {
            num_classes: 3,
            dims: 4,
            rho: 4.0,
            n_max: 40,
            separation: 6.0,
            test_per_class: 20,
            val_per_class: 0,
            seed: None,
        };
        cfg.stage1.schedule = LrSchedule {
            warmup_epochs: 1,
            peak_lr: 0.05,
            min_lr: 1e-4,
            total_epochs: 3,
        };
        cfg.stage2.schedule.total_epochs = 2;
        cfg.groups = Some(GroupSpec {
            majority_size: 1,
            minority_size: 1,
        });
        cfg
    }

    #[test]
    fn config_round_trips() {
        let cfg = tiny("CE+SC→cRW");
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"schema_version": 1, "method": "CE",
                "dataset": {"source": "synthetic", "num_classes": 5, "dims": 16,
                            "rho": 100, "n_max": 2000, "separation": 3.0}}"#,
        )
        .unwrap();
        assert_eq!(cfg.stage1, Stage1Config::default());
        assert_eq!(cfg.seed, 0);
    }

    #[test]
    fn errors_name_the_field() {
        let base = serde_json::to_value(tiny("CE")).unwrap();
        type Edit = Box<dyn Fn(&mut serde_json::Value)>;
        let cases: [(&str, Edit); 5] = [
            (
                "stage1.loss.lambda",
                Box::new(|v| v["stage1"]["loss"]["lambda"] = (-1.0).into()),
            ),
            (
                "stage1.sgd",
                Box::new(|v| v["stage1"]["sgd"]["nesterov"] = true.into()),
            ),
            (
                "schema_version",
                Box::new(|v| v["schema_version"] = 2.into()),
            ),
            ("method", Box::new(|v| v["method"] = "CE→XX".into())),
            ("dataset", Box::new(|v| v["dataset"]["rho"] = 0.5.into())),
        ];
        for (field, edit) in cases {
            let mut v = base.clone();
            edit(&mut v);
            let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
            match &err {
                Error::Config { field: f, .. } => assert!(f.starts_with(field), "{field}: {err}"),
                other => panic!("{field}: expected a config error, got {other}"),
            }
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let out = parallel_map(17, 4, |i| i * i);
        assert_eq!(out, (0..17).map(|i| i * i).collect::<Vec<_>>());
        assert!(parallel_map(0, 3, |i| i).is_empty());
    }

    #[test]
    fn grid_results_do_not_depend_on_threads() {
        let cfg = tiny("CE+SC");
        let one = sweep(&cfg, "lambda", &[0.5, 0.0], &[1, 2], None, 1).unwrap();
        let three = sweep(&cfg, "lambda", &[0.0, 0.5], &[1, 2], None, 3).unwrap();
        assert_eq!(one, three);
        assert_eq!(
            one.iter().map(|r| r.param_value).collect::<Vec<_>>(),
            [0.0, 0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn ablation_ce_row_matches_a_plain_run() {
        let cfg = tiny("CE");
        let rows = ablate(&cfg, &[4], None, 2).unwrap();
        assert_eq!(rows.len(), 5);
        let plain = run_experiment(&cfg, cfg.method, 4).unwrap();
        assert_eq!(rows[0].runs[0], plain.report);
        assert_eq!(rows[0].mcr_minor, plain.report.eval.mcr_minor);
        assert!(!rows[3].ce && rows[3].sc && rows[3].crw);
    }

    #[test]
    fn grid_validation() {
        assert!(normalize_grid(&[]).is_err());
        assert_eq!(
            normalize_grid(&[0.004, 5e-5, 0.004]).unwrap(),
            [5e-5, 0.004]
        );
        let cell = MatrixCell {
            label: "a".into(),
            config: tiny("CE"),
            method: "CE".parse().unwrap(),
            seed: 0,
            out_dir: Some("x".into()),
        };
        let m = ExperimentMatrix {
            cells: vec![cell.clone(), cell],
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
