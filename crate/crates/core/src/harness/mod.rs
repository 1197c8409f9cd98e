//! Bias-strength sweeps, empirical bound checks, breaking points and reports.

mod plot;
mod report;

pub use plot::{emit_plot, emit_pvalue_plot, render_plot, render_pvalue_plot};
pub use report::{emit_report, load_result, ReportFormat, CSV_HEADER};

use crate::datagen::{
    colorize, gen_gaussian_biased, gen_gaussian_cells, mix_bias, parse_idx, split_eval, BiasKind, BiasSpec,
    ColorSplit, ColorizeConfig, DataError, GaussianTask, IdxData, IdxImages, LabeledDataset, MixMode,
};
use crate::debias::{self, extract_features, DebiasConfig, DebiasError, Method, TrainedModel};
use crate::mi_estim::{binned_mi, knn_mi, neural_dv_mi, DvConfig, EstimError, MiEstimate, SamplePairs};
use crate::stats::{ks_one_sided, BreakingPointReport, StatsError, TrialSamples, ALPHA};
use ndarray::Axis as NdAxis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Tolerance on estimated bound margins; the exact inequality is only
/// asserted on exact distributions.
pub const MARGIN_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep configuration: {0}")]
    InvalidConfig(String),
    #[error("no `{method}` results at level {level} (need at least 2 completed trials)")]
    MissingCell { method: String, level: usize },
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Debias(#[from] DebiasError),
    #[error(transparent)]
    Estim(#[from] EstimError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Gaussian features, bias set by the agreement probability.
    Gaussian,
    /// Coloured digits from IDX files, bias set by the colour variance.
    ColorizedDigits,
    /// Biased and bias-conflicting Gaussian pools mixed at a fixed total size,
    /// bias set by the conflicting fraction.
    TabularMix,
}

impl TaskKind {
    pub fn bias_kind(self) -> BiasKind {
        match self {
            TaskKind::Gaussian => BiasKind::AgreementProb,
            TaskKind::ColorizedDigits => BiasKind::ColorVariance,
            TaskKind::TabularMix => BiasKind::ConflictFraction,
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(TaskKind::Gaussian),
            "colorized_digits" | "colorized" => Ok(TaskKind::ColorizedDigits),
            "tabular_mix" => Ok(TaskKind::TabularMix),
            other => Err(HarnessError::InvalidConfig(format!(
                "unknown task `{other}` (expected gaussian, colorized_digits or tabular_mix)"
            ))),
        }
    }
}

/// IDX files for the coloured-digit task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DigitFiles {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

/// Estimator used for `I(Z;A)` and `I(Z;Y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorChoice {
    NeuralDv { config: DvConfig },
    Knn { k: usize },
    Binned { bins: usize },
}

impl Default for EstimatorChoice {
    fn default() -> Self {
        EstimatorChoice::NeuralDv { config: DvConfig::default() }
    }
}

impl EstimatorChoice {
    pub fn sweep_default() -> Self {
        EstimatorChoice::NeuralDv { config: DvConfig::default() }
    }

    pub fn estimate(&self, pairs: &SamplePairs) -> Result<MiEstimate, EstimError> {
        match self {
            EstimatorChoice::NeuralDv { config } => neural_dv_mi(pairs, config),
            EstimatorChoice::Knn { k } => knn_mi(pairs, *k),
            EstimatorChoice::Binned { bins } => binned_mi(pairs, *bins),
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        match self {
            EstimatorChoice::NeuralDv { config } => EstimatorChoice::NeuralDv { config: DvConfig { seed, ..config.clone() } },
            other => other.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub task: TaskKind,
    pub gaussian: GaussianTask,
    pub digits: Option<DigitFiles>,
    pub grid: Vec<BiasSpec>,
    pub methods: Vec<Method>,
    /// Per-method regulariser weights; missing methods use their default.
    pub lambdas: BTreeMap<Method, f64>,
    pub trials: usize,
    pub base_seed: u64,
    pub n_train: usize,
    /// Samples per `(y, a)` cell in the unbiased evaluation split.
    pub eval_per_cell: usize,
    /// Architecture and optimiser; `lambda` and `base.seed` are set per cell.
    pub training: DebiasConfig,
    pub estimator: EstimatorChoice,
    /// Training rows used for the information estimates (all when larger).
    pub estimator_samples: usize,
}

impl Default for SweepConfig {
    /// The desk-scale Gaussian sweep: five agreement levels, four methods,
    /// seven trials.
    fn default() -> Self {
        let grid = [1.0, 0.95, 0.9, 0.75, 0.5]
            .iter()
            .map(|&q| BiasSpec { kind: BiasKind::AgreementProb, value: q })
            .collect();
        SweepConfig {
            task: TaskKind::Gaussian,
            gaussian: GaussianTask::default(),
            digits: None,
            grid,
            methods: vec![Method::Baseline, Method::LnlAdv, Method::End, Method::Lff],
            lambdas: BTreeMap::new(),
            trials: 7,
            base_seed: 0,
            n_train: 2000,
            eval_per_cell: 250,
            training: DebiasConfig::default(),
            estimator: EstimatorChoice::sweep_default(),
            estimator_samples: 2000,
        }
    }
}

impl SweepConfig {
    pub fn lambda(&self, method: Method) -> f64 {
        self.lambdas.get(&method).copied().unwrap_or_else(|| method.default_lambda())
    }

    pub fn bias_kind(&self) -> BiasKind {
        self.task.bias_kind()
    }

    /// Sorts the grid ascending in `H(Y|A)` and checks everything else.
    pub fn canonicalize(&mut self) -> Result<(), HarnessError> {
        self.grid.sort_by(|a, b| a.axis_value().total_cmp(&b.axis_value()));
        self.validate()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::InvalidConfig(m));
        if self.trials < 2 {
            return bad(format!("trials must be >= 2 for the KS test, got {}", self.trials));
        }
        if self.grid.is_empty() {
            return bad("bias grid is empty".into());
        }
        if self.methods.is_empty() {
            return bad("no methods selected".into());
        }
        let kind = self.bias_kind();
        for spec in &self.grid {
            if spec.kind != kind {
                return bad(format!("task {:?} needs {} levels, got {}", self.task, kind.name(), spec.kind.name()));
            }
            BiasSpec::new(spec.kind, spec.value)?;
        }
        for w in self.grid.windows(2) {
            if !(w[1].axis_value() > w[0].axis_value()) {
                return bad(format!("grid must be strictly ascending in H(Y|A); {} does not follow {}", w[1].value, w[0].value));
            }
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return bad("methods are listed twice".into());
        }
        if self.n_train < 2 || self.eval_per_cell == 0 || self.estimator_samples < 2 {
            return bad("n_train, eval_per_cell and estimator_samples must be positive".into());
        }
        if self.task == TaskKind::ColorizedDigits && self.digits.is_none() {
            return bad("the colorized_digits task needs IDX file paths".into());
        }
        if let Some((m, l)) = self.lambdas.iter().find(|(_, l)| !(**l >= 0.0 && l.is_finite())) {
            return bad(format!("lambda for {m} must be >= 0, got {l}"));
        }
        let mut probe = self.training.clone();
        probe.lambda = 0.0;
        probe.validate()?;
        Ok(())
    }
}

/// `base ^ first 8 bytes of sha256(tag, level, trial)`.
pub fn derive_seed(base: u64, tag: &str, level: usize, trial: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update([0]);
    h.update((level as u64).to_le_bytes());
    h.update((trial as u64).to_le_bytes());
    let digest = h.finalize();
    base ^ u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One trained model's outcome. `None` fields belong to failed cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub method: Method,
    pub level: usize,
    pub bias_kind: BiasKind,
    pub bias_value: f64,
    pub hya_nats: f64,
    pub trial: usize,
    pub train_seed: u64,
    pub acc_unbiased: Option<f64>,
    pub acc_conflicting: Option<f64>,
    pub iza_nats: Option<f64>,
    pub izy_nats: Option<f64>,
    pub error: Option<String>,
}

impl TrialRow {
    pub fn margin(&self) -> Option<f64> {
        Some(self.iza_nats? + self.hya_nats - self.izy_nats?)
    }
}

/// Mean and sample standard deviation over a cell's completed trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub level: usize,
    pub bias_value: f64,
    pub axis_value: f64,
    pub completed: usize,
    pub hya_mean: f64,
    pub acc_unbiased_mean: f64,
    pub acc_unbiased_std: f64,
    pub acc_conflicting_mean: f64,
    pub acc_conflicting_std: f64,
    pub iza_mean: Option<f64>,
    pub izy_mean: Option<f64>,
    pub min_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: Method,
    pub level: usize,
    pub trial: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub config: SweepConfig,
    pub rows: Vec<TrialRow>,
    pub summary: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
}

impl SweepResult {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn rows_for(&self, method: Method, level: usize) -> impl Iterator<Item = &TrialRow> {
        self.rows.iter().filter(move |r| r.method == method && r.level == level)
    }

    pub fn cell(&self, method: Method, level: usize) -> Option<&CellSummary> {
        self.summary.iter().find(|c| c.method == method && c.level == level)
    }

    pub fn min_margin(&self) -> Option<f64> {
        self.rows.iter().filter_map(TrialRow::margin).reduce(f64::min)
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - m).powi(2)).sum();
    (m, (ss / (v.len() - 1) as f64).sqrt())
}

fn summarize(config: &SweepConfig, rows: &[TrialRow]) -> Vec<CellSummary> {
    let mut out = Vec::new();
    for &method in &config.methods {
        for (level, spec) in config.grid.iter().enumerate() {
            let ok: Vec<&TrialRow> = rows.iter().filter(|r| r.method == method && r.level == level && r.error.is_none()).collect();
            let col = |f: fn(&TrialRow) -> Option<f64>| ok.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let (au, su) = mean_std(&col(|r| r.acc_unbiased));
            let (ac, sc) = mean_std(&col(|r| r.acc_conflicting));
            let (hya, _) = mean_std(&ok.iter().map(|r| r.hya_nats).collect::<Vec<_>>());
            let opt_mean = |v: Vec<f64>| (!v.is_empty()).then(|| mean_std(&v).0);
            out.push(CellSummary {
                method,
                level,
                bias_value: spec.value,
                axis_value: spec.axis_value(),
                completed: ok.len(),
                hya_mean: hya,
                acc_unbiased_mean: au,
                acc_unbiased_std: su,
                acc_conflicting_mean: ac,
                acc_conflicting_std: sc,
                iza_mean: opt_mean(col(|r| r.iza_nats)),
                izy_mean: opt_mean(col(|r| r.izy_nats)),
                min_margin: ok.iter().filter_map(|r| r.margin()).reduce(f64::min),
            });
        }
    }
    out
}

/// Training and evaluation data for one `(level, trial)`, shared by every
/// method so that methods are compared on identical draws.
struct CellData {
    train: LabeledDataset,
    unbiased: LabeledDataset,
    conflicting: LabeledDataset,
}

struct Digits {
    train: (IdxImages, Vec<u8>),
    test: (IdxImages, Vec<u8>),
}

fn read_idx(path: &Path) -> Result<IdxData, HarnessError> {
    let bytes = std::fs::read(path).map_err(io_error(path))?;
    parse_idx(&bytes).map_err(|e| HarnessError::Parse { path: path.display().to_string(), message: e.to_string() })
}

fn load_digits(files: &DigitFiles) -> Result<Digits, HarnessError> {
    let pair = |img: &Path, lab: &Path| -> Result<(IdxImages, Vec<u8>), HarnessError> {
        match (read_idx(img)?, read_idx(lab)?) {
            (IdxData::Images(i), IdxData::Labels(l)) => Ok((i, l)),
            _ => Err(HarnessError::Parse {
                path: format!("{} / {}", img.display(), lab.display()),
                message: "expected an image file and a label file".into(),
            }),
        }
    };
    Ok(Digits {
        train: pair(&files.train_images, &files.train_labels)?,
        test: pair(&files.test_images, &files.test_labels)?,
    })
}

fn take_digits(src: &(IdxImages, Vec<u8>), n: usize, seed: u64) -> (IdxImages, Vec<u8>) {
    let mut idx: Vec<usize> = (0..src.1.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    let pixels = src.0.pixels.select(NdAxis(0), &idx);
    (IdxImages { pixels }, idx.iter().map(|&i| src.1[i]).collect())
}

fn balanced_gaussian_eval(config: &SweepConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let k = config.eval_per_cell;
    let cells = [((0, 0), k), ((0, 1), k), ((1, 0), k), ((1, 1), k)];
    let pool = gen_gaussian_cells(&cells, &config.gaussian, seed)?;
    split_eval(&pool, k, seed)
}

fn train_data(config: &SweepConfig, digits: Option<&Digits>, spec: BiasSpec, seed: u64) -> Result<LabeledDataset, HarnessError> {
    let n = config.n_train;
    Ok(match config.task {
        TaskKind::Gaussian => gen_gaussian_biased(n, spec.value, &config.gaussian, seed)?,
        TaskKind::TabularMix => {
            let half = n.div_ceil(2);
            let biased = gen_gaussian_cells(&[((0, 0), half), ((1, 1), half)], &config.gaussian, seed ^ 2)?;
            let conflicting = gen_gaussian_cells(&[((0, 1), half), ((1, 0), half)], &config.gaussian, seed ^ 3)?;
            mix_bias(&biased, &conflicting, spec.value, MixMode::ConstantTotal(n), seed)?
        }
        TaskKind::ColorizedDigits => {
            let digits = digits.ok_or_else(|| HarnessError::InvalidConfig("colorized_digits needs IDX files".into()))?;
            let (img, lab) = take_digits(&digits.train, n, seed);
            colorize(&img, &lab, &ColorizeConfig { variance: spec.value, ..ColorizeConfig::default() }, seed)?
        }
    })
}

/// The training set a sweep would draw for `spec` with data seed `seed`.
pub fn training_set(config: &SweepConfig, spec: BiasSpec, seed: u64) -> Result<LabeledDataset, HarnessError> {
    if spec.kind != config.bias_kind() {
        return Err(HarnessError::InvalidConfig(format!(
            "task {:?} is controlled by {}, not {}",
            config.task,
            config.bias_kind().name(),
            spec.kind.name()
        )));
    }
    let digits = match &config.digits {
        Some(files) if config.task == TaskKind::ColorizedDigits => Some(load_digits(files)?),
        _ => None,
    };
    train_data(config, digits.as_ref(), spec, seed)
}

fn cell_data(config: &SweepConfig, digits: Option<&Digits>, level: usize, trial: usize) -> Result<CellData, HarnessError> {
    let spec = config.grid[level];
    let seed = derive_seed(config.base_seed, "data", level, trial);
    let train = train_data(config, digits, spec, seed)?;
    let (unbiased, conflicting) = match config.task {
        TaskKind::Gaussian | TaskKind::TabularMix => balanced_gaussian_eval(config, seed ^ 1)?,
        TaskKind::ColorizedDigits => {
            let digits = digits.expect("digits loaded for colorized task");
            let test_cfg = ColorizeConfig { split: ColorSplit::Test, ..ColorizeConfig::default() };
            let test = colorize(&digits.test.0, &digits.test.1, &test_cfg, seed ^ 1)?;
            split_eval(&test, config.eval_per_cell, seed ^ 1)?
        }
    };
    Ok(CellData { train, unbiased, conflicting })
}

/// Estimated terms of `0 <= I(Z;Y) <= I(Z;A) + H(Y|A)` for one model on one
/// dataset. Estimates that fail leave their fields empty and mark the report
/// unreliable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub izy_nats: Option<f64>,
    pub iza_nats: Option<f64>,
    pub hya_nats: f64,
    pub margin_nats: Option<f64>,
    pub reliable: bool,
    pub n: usize,
    pub izy_estimate: Option<MiEstimate>,
    pub iza_estimate: Option<MiEstimate>,
    pub errors: Vec<String>,
}

impl BoundReport {
    pub fn holds(&self, tolerance: f64) -> bool {
        self.margin_nats.is_some_and(|m| m >= -tolerance)
    }
}

/// Estimates `I(Z;A)` and `I(Z;Y)` on the model's features for `data` with
/// identical estimator settings, so that `Y = A` yields a margin of exactly
/// `H(Y|A) = 0`.
pub fn verify_bound(model: &TrainedModel, data: &LabeledDataset, estimator: &EstimatorChoice) -> Result<BoundReport, HarnessError> {
    let z = extract_features(model, data.features.view())?;
    let hya = data.hya();
    let run = |labels: &[usize]| SamplePairs::new(z.clone(), labels.to_vec()).and_then(|p| estimator.estimate(&p));
    let mut errors = Vec::new();
    let mut keep = |r: Result<MiEstimate, EstimError>, what: &str| match r {
        Ok(e) => Some(e),
        Err(e) => {
            errors.push(format!("{what}: {e}"));
            None
        }
    };
    let iza = keep(run(&data.attributes), "I(Z;A)");
    let izy = keep(run(&data.targets), "I(Z;Y)");
    let iza_v = iza.as_ref().map(|e| e.value_nats);
    let izy_v = izy.as_ref().map(|e| e.value_nats);
    let margin = iza_v.zip(izy_v).map(|(a, y)| a + hya - y);
    Ok(BoundReport {
        izy_nats: izy_v,
        iza_nats: iza_v,
        hya_nats: hya,
        margin_nats: margin,
        reliable: errors.is_empty(),
        n: data.len(),
        izy_estimate: izy,
        iza_estimate: iza,
        errors,
    })
}

fn estimation_subset(data: &LabeledDataset, k: usize, seed: u64) -> LabeledDataset {
    if data.len() <= k {
        return data.clone();
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(k);
    idx.sort_unstable();
    data.subset(&idx, data.provenance.clone())
}

fn model_file(dir: &Path, method: Method, level: usize, trial: usize) -> PathBuf {
    dir.join(format!("{}_level{level}_trial{trial}.json", method.name()))
}

fn run_cell(
    config: &SweepConfig,
    data: &CellData,
    method: Method,
    level: usize,
    trial: usize,
    models_dir: Option<&Path>,
) -> Result<(f64, f64, BoundReport), HarnessError> {
    let train_seed = derive_seed(config.base_seed, method.name(), level, trial);
    let mut cfg = config.training.clone();
    cfg.lambda = config.lambda(method);
    cfg.base.seed = train_seed;
    let model = debias::train(method, &data.train, &cfg)?;
    if let Some(dir) = models_dir {
        model.save(&model_file(dir, method, level, trial))?;
    }
    let acc_u = model.accuracy(&data.unbiased)?;
    let acc_c = model.accuracy(&data.conflicting)?;
    let est_seed = derive_seed(config.base_seed, "estimator", level, trial);
    let subset = estimation_subset(&data.train, config.estimator_samples, est_seed);
    let bound = verify_bound(&model, &subset, &config.estimator.with_seed(est_seed))?;
    Ok((acc_u, acc_c, bound))
}

pub fn run_sweep(config: &SweepConfig) -> Result<SweepResult, HarnessError> {
    run_sweep_saving(config, None)
}

/// Runs every `(method, level, trial)` cell in parallel and aggregates in a
/// fixed order. A cell that fails is recorded and the sweep carries on.
/// With `models_dir` every trained model is written there as JSON.
pub fn run_sweep_saving(config: &SweepConfig, models_dir: Option<&Path>) -> Result<SweepResult, HarnessError> {
    let mut config = config.clone();
    config.canonicalize()?;
    if let Some(dir) = models_dir {
        if !dir.is_dir() {
            return Err(HarnessError::InvalidConfig(format!("models directory {} does not exist", dir.display())));
        }
    }
    let digits = match (&config.task, &config.digits) {
        (TaskKind::ColorizedDigits, Some(files)) => Some(load_digits(files)?),
        _ => None,
    };
    let jobs: Vec<(usize, usize)> = (0..config.grid.len()).flat_map(|l| (0..config.trials).map(move |t| (l, t))).collect();
    let per_job: Vec<Vec<TrialRow>> = jobs
        .par_iter()
        .map(|&(level, trial)| {
            let spec = config.grid[level];
            let data = cell_data(&config, digits.as_ref(), level, trial);
            let hya = data.as_ref().map(|d| d.train.hya()).unwrap_or(f64::NAN);
            config
                .methods
                .iter()
                .map(|&method| {
                    let train_seed = derive_seed(config.base_seed, method.name(), level, trial);
                    let outcome = data
                        .as_ref()
                        .map_err(|e| e.to_string())
                        .and_then(|d| run_cell(&config, d, method, level, trial, models_dir).map_err(|e| e.to_string()));
                    let mut row = TrialRow {
                        method,
                        level,
                        bias_kind: spec.kind,
                        bias_value: spec.value,
                        hya_nats: if hya.is_finite() { hya } else { 0.0 },
                        trial,
                        train_seed,
                        acc_unbiased: None,
                        acc_conflicting: None,
                        iza_nats: None,
                        izy_nats: None,
                        error: None,
                    };
                    match outcome {
                        Ok((au, ac, bound)) => {
                            row.acc_unbiased = Some(au);
                            row.acc_conflicting = Some(ac);
                            row.iza_nats = bound.iza_nats;
                            row.izy_nats = bound.izy_nats;
                            if !bound.reliable {
                                row.error = Some(bound.errors.join("; "));
                            }
                        }
                        Err(e) => row.error = Some(e),
                    }
                    row
                })
                .collect()
        })
        .collect();

    // Order rows method-major, then level, then trial.
    let mut rows: Vec<TrialRow> = per_job.into_iter().flatten().collect();
    let method_rank = |m: Method| config.methods.iter().position(|&x| x == m).expect("known method");
    rows.sort_by_key(|r| (method_rank(r.method), r.level, r.trial));
    let failures = rows
        .iter()
        .filter_map(|r| {
            r.error.as_ref().map(|e| CellFailure { method: r.method, level: r.level, trial: r.trial, error: e.clone() })
        })
        .collect();
    let summary = summarize(&config, &rows);
    Ok(SweepResult { config, rows, summary, failures })
}

fn accuracies(result: &SweepResult, method: Method, level: usize) -> Result<TrialSamples, HarnessError> {
    let v: Vec<f64> = result.rows_for(method, level).filter(|r| r.error.is_none()).filter_map(|r| r.acc_unbiased).collect();
    if v.len() < 2 {
        return Err(HarnessError::MissingCell { method: method.name().into(), level });
    }
    Ok(TrialSamples::new(v)?)
}

/// One-sided KS test of every non-baseline method against `baseline` at each
/// level, then the breaking point per method. Levels are placed on the
/// `H(Y|A)` axis (colour variance for coloured digits).
pub fn sweep_breaking_points(result: &SweepResult, baseline: Method) -> Result<Vec<BreakingPointReport>, HarnessError> {
    let grid: Vec<f64> = result.config.grid.iter().map(BiasSpec::axis_value).collect();
    let base: Vec<TrialSamples> = (0..grid.len()).map(|l| accuracies(result, baseline, l)).collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for &method in result.config.methods.iter().filter(|&&m| m != baseline) {
        let p = (0..grid.len())
            .map(|l| Ok(ks_one_sided(&accuracies(result, method, l)?, &base[l]).p))
            .collect::<Result<Vec<f64>, HarnessError>>()?;
        out.push(BreakingPointReport::new(method.name(), grid.clone(), p, ALPHA)?);
    }
    Ok(out)
}

/// Bound report for an untrained extractor, the low-information reference.
pub fn untrained_bound(data: &LabeledDataset, training: &DebiasConfig, estimator: &EstimatorChoice) -> Result<BoundReport, HarnessError> {
    let mut cfg = training.clone();
    cfg.lambda = 0.0;
    let model = debias::untrained(data.dim(), data.n_targets.max(2), &cfg)?;
    verify_bound(&model, data, estimator)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::TrainConfig;

    fn tiny(methods: Vec<Method>, levels: &[f64], trials: usize) -> SweepConfig {
        SweepConfig {
            grid: levels.iter().map(|&q| BiasSpec { kind: BiasKind::AgreementProb, value: q }).collect(),
            methods,
            trials,
            n_train: 300,
            eval_per_cell: 40,
            training: DebiasConfig { base: TrainConfig { epochs: 2, ..TrainConfig::default() }, ..DebiasConfig::default() },
            estimator: EstimatorChoice::Knn { k: 5 },
            estimator_samples: 200,
            ..SweepConfig::default()
        }
    }

    #[test]
    fn seeds_differ_by_every_coordinate() {
        let s = derive_seed(0, "baseline", 0, 0);
        assert_ne!(s, derive_seed(0, "baseline", 0, 1));
        assert_ne!(s, derive_seed(0, "baseline", 1, 0));
        assert_ne!(s, derive_seed(0, "end", 0, 0));
        assert_eq!(derive_seed(5, "end", 2, 3) ^ 5, derive_seed(0, "end", 2, 3));
    }

    #[test]
    fn single_level_accounting() {
        let r = run_sweep(&tiny(vec![Method::Baseline], &[0.9], 2)).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.is_complete());
        assert_eq!(r.summary.len(), 1);
        assert_eq!(r.summary[0].completed, 2);
    }

    #[test]
    fn grid_is_canonicalized_and_validated() {
        let r = run_sweep(&tiny(vec![Method::Baseline], &[0.5, 1.0], 2)).unwrap();
        assert_eq!(r.config.grid[0].value, 1.0);
        assert!(run_sweep(&tiny(vec![Method::Baseline], &[0.9], 1)).is_err());
        assert!(run_sweep(&tiny(vec![Method::Baseline], &[0.9, 0.9], 2)).is_err());
        let mut wrong_kind = tiny(vec![Method::Baseline], &[0.9], 2);
        wrong_kind.grid[0].kind = BiasKind::ColorVariance;
        assert!(run_sweep(&wrong_kind).is_err());
    }

    #[test]
    fn sweep_is_deterministic_and_thread_independent() {
        let cfg = tiny(vec![Method::Baseline, Method::End], &[1.0, 0.75], 2);
        let a = run_sweep(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_sweep(&cfg)).unwrap();
        assert_eq!(a, b);
        let reports = sweep_breaking_points(&a, Method::Baseline).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].grid, vec![0.0, crate::exact_info::binary_entropy(0.75)]);
    }

    #[test]
    fn missing_baseline_is_an_error() {
        let r = run_sweep(&tiny(vec![Method::End], &[0.9], 2)).unwrap();
        assert!(matches!(sweep_breaking_points(&r, Method::Baseline), Err(HarnessError::MissingCell { .. })));
    }

    #[test]
    fn identical_labels_give_zero_margin() {
        let data = gen_gaussian_biased(400, 1.0, &GaussianTask::default(), 1).unwrap();
        let est = EstimatorChoice::NeuralDv { config: DvConfig { iterations: 100, ..DvConfig::default() } };
        let report = untrained_bound(&data, &DebiasConfig::default(), &est).unwrap();
        assert_eq!(report.margin_nats, Some(0.0));
        assert!(report.reliable);
    }

    #[test]
    fn estimator_failure_is_reported_not_raised() {
        let data = gen_gaussian_biased(20, 0.5, &GaussianTask::default(), 1).unwrap();
        let report = untrained_bound(&data, &DebiasConfig::default(), &EstimatorChoice::default()).unwrap();
        assert!(!report.reliable);
        assert_eq!(report.margin_nats, None);
        assert!(!report.holds(MARGIN_TOLERANCE));
    }
}
