//! Sweep configuration files.
//!
//! A TOML document with the sections `[task]`, `[grid]`, `[methods]`,
//! `[training]`, `[estimators]` and `[output]`. Every key is optional and
//! falls back to the library default; unknown keys are rejected with their
//! line number and the closest valid key.

use crate::CliError;
use bbl_core::datagen::{BiasSpec, GaussianTask};
use bbl_core::debias::{DebiasConfig, Method};
use bbl_core::harness::{DigitFiles, EstimatorChoice, SweepConfig, TaskKind};
use bbl_core::mi_estim::DvConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub task: TaskSection,
    pub grid: GridSection,
    pub methods: MethodsSection,
    pub training: TrainingSection,
    pub estimators: EstimatorSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub kind: String,
    pub signal_dims: usize,
    pub spurious_dims: usize,
    pub noise_sigma: f64,
    pub n_train: usize,
    pub eval_per_cell: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// Bias-knob values; their meaning follows from the task kind.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodsSection {
    pub names: Vec<String>,
    pub trials: usize,
    pub seed: u64,
    /// Regulariser weights keyed by method name.
    pub lambda: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub extractor_widths: Vec<usize>,
    pub aux_width: usize,
    pub gce_q: f64,
    pub end_entangle: f64,
    pub dv_ema_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    /// `neural_dv`, `knn` or `binned`.
    pub kind: String,
    /// Training rows used per estimate.
    pub samples: usize,
    pub k: usize,
    pub bins: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub ema_rate: f64,
    pub holdout_fraction: f64,
    pub checkpoints: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub json: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub svg: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub models_dir: Option<PathBuf>,
}

fn task_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Gaussian => "gaussian",
        TaskKind::ColorizedDigits => "colorized_digits",
        TaskKind::TabularMix => "tabular_mix",
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        TaskSection {
            kind: task_name(sweep.task).into(),
            signal_dims: sweep.gaussian.signal_dims,
            spurious_dims: sweep.gaussian.spurious_dims,
            noise_sigma: sweep.gaussian.noise_sigma,
            n_train: sweep.n_train,
            eval_per_cell: sweep.eval_per_cell,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection { values: SweepConfig::default().grid.iter().map(|s| s.value).collect() }
    }
}

impl Default for MethodsSection {
    fn default() -> Self {
        let sweep = SweepConfig::default();
        MethodsSection {
            names: sweep.methods.iter().map(|m| m.name().to_string()).collect(),
            trials: sweep.trials,
            seed: sweep.base_seed,
            lambda: sweep
                .methods
                .iter()
                .filter(|m| m.default_lambda() > 0.0)
                .map(|m| (m.name().to_string(), m.default_lambda()))
                .collect(),
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        let d = DebiasConfig::default();
        TrainingSection {
            learning_rate: d.base.learning_rate,
            batch_size: d.base.batch_size,
            epochs: d.base.epochs,
            beta1: d.base.beta1,
            beta2: d.base.beta2,
            epsilon: d.base.epsilon,
            extractor_widths: d.extractor_widths,
            aux_width: d.aux_width,
            gce_q: d.gce_q,
            end_entangle: d.end_entangle,
            dv_ema_rate: d.dv_ema_rate,
        }
    }
}

impl Default for EstimatorSection {
    fn default() -> Self {
        let dv = DvConfig::default();
        EstimatorSection {
            kind: "neural_dv".into(),
            samples: SweepConfig::default().estimator_samples,
            k: 5,
            bins: 8,
            hidden_width: dv.hidden_width,
            hidden_layers: dv.hidden_layers,
            learning_rate: dv.learning_rate,
            batch_size: dv.batch_size,
            iterations: dv.iterations,
            ema_rate: dv.ema_rate,
            holdout_fraction: dv.holdout_fraction,
            checkpoints: dv.checkpoints,
        }
    }
}

impl Default for ConfigFile {
    fn default() -> Self {
        ConfigFile {
            task: TaskSection::default(),
            grid: GridSection::default(),
            methods: MethodsSection::default(),
            training: TrainingSection::default(),
            estimators: EstimatorSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Every section and key name, for "did you mean" hints.
const KNOWN_KEYS: &[&str] = &[
    "task", "grid", "methods", "training", "estimators", "output",
    "kind", "signal_dims", "spurious_dims", "noise_sigma", "n_train", "eval_per_cell",
    "train_images", "train_labels", "test_images", "test_labels",
    "values",
    "names", "trials", "seed", "lambda",
    "learning_rate", "batch_size", "epochs", "beta1", "beta2", "epsilon",
    "extractor_widths", "aux_width", "gce_q", "end_entangle", "dv_ema_rate",
    "samples", "k", "bins", "hidden_width", "hidden_layers", "iterations", "ema_rate",
    "holdout_fraction", "checkpoints",
    "csv", "json", "svg", "models_dir",
];

fn nearest_key(unknown: &str) -> &'static str {
    KNOWN_KEYS
        .iter()
        .min_by_key(|k| strsim::levenshtein(unknown, k))
        .expect("non-empty key list")
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| line_of(text, s.start));
            let at = line.map(|l| format!("{origin}:{l}")).unwrap_or_else(|| origin.to_string());
            let message = e.message();
            if let Some(rest) = message.strip_prefix("unknown field `") {
                let key = rest.split('`').next().unwrap_or_default();
                return CliError::Usage(format!(
                    "{at}: unknown key `{key}` (did you mean `{}`?)",
                    nearest_key(key)
                ));
            }
            CliError::Usage(format!("{at}: {}", message.trim()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// The complete configuration with defaults filled in, as TOML.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_sweep(&self) -> Result<SweepConfig, CliError> {
        let usage = |m: String| CliError::Usage(m);
        let task: TaskKind = self.task.kind.parse().map_err(|e| usage(format!("[task] kind: {e}")))?;
        let grid = self
            .grid
            .values
            .iter()
            .map(|&v| BiasSpec::new(task.bias_kind(), v))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("[grid] values: {e}")))?;
        let methods = self
            .methods
            .names
            .iter()
            .map(|n| n.parse::<Method>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("[methods] names: {e}")))?;
        let lambdas = self
            .methods
            .lambda
            .iter()
            .map(|(k, &v)| k.parse::<Method>().map(|m| (m, v)))
            .collect::<Result<BTreeMap<_, _>, _>>()
            .map_err(|e| usage(format!("[methods] lambda: {e}")))?;
        let t = &self.task;
        let digits = match (&t.train_images, &t.train_labels, &t.test_images, &t.test_labels) {
            (Some(a), Some(b), Some(c), Some(d)) => Some(DigitFiles {
                train_images: a.clone(),
                train_labels: b.clone(),
                test_images: c.clone(),
                test_labels: d.clone(),
            }),
            (None, None, None, None) => None,
            _ => return Err(usage("[task] needs all four of train_images, train_labels, test_images, test_labels".into())),
        };
        if task == TaskKind::ColorizedDigits && digits.is_none() {
            return Err(usage("[task] colorized_digits needs train_images, train_labels, test_images and test_labels".into()));
        }
        let tr = &self.training;
        let mut training = DebiasConfig {
            extractor_widths: tr.extractor_widths.clone(),
            aux_width: tr.aux_width,
            gce_q: tr.gce_q,
            end_entangle: tr.end_entangle,
            dv_ema_rate: tr.dv_ema_rate,
            ..DebiasConfig::default()
        };
        training.base.learning_rate = tr.learning_rate;
        training.base.batch_size = tr.batch_size;
        training.base.epochs = tr.epochs;
        training.base.beta1 = tr.beta1;
        training.base.beta2 = tr.beta2;
        training.base.epsilon = tr.epsilon;
        let e = &self.estimators;
        let estimator = match e.kind.as_str() {
            "neural_dv" => EstimatorChoice::NeuralDv {
                config: DvConfig {
                    hidden_width: e.hidden_width,
                    hidden_layers: e.hidden_layers,
                    learning_rate: e.learning_rate,
                    batch_size: e.batch_size,
                    iterations: e.iterations,
                    ema_rate: e.ema_rate,
                    holdout_fraction: e.holdout_fraction,
                    checkpoints: e.checkpoints,
                    ..DvConfig::default()
                },
            },
            "knn" => EstimatorChoice::Knn { k: e.k },
            "binned" => EstimatorChoice::Binned { bins: e.bins },
            other => return Err(usage(format!("[estimators] kind: unknown estimator `{other}` (expected neural_dv, knn or binned)"))),
        };
        let config = SweepConfig {
            task,
            gaussian: GaussianTask { signal_dims: t.signal_dims, spurious_dims: t.spurious_dims, noise_sigma: t.noise_sigma },
            digits,
            grid,
            methods,
            lambdas,
            trials: self.methods.trials,
            base_seed: self.methods.seed,
            n_train: t.n_train,
            eval_per_cell: t.eval_per_cell,
            training,
            estimator,
            estimator_samples: e.samples,
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(config)
    }
}
